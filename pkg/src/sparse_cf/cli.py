"""``sparse-cf`` command line.

Exit codes: 0 success, 1 runtime or acceptance failure, 2 usage or
configuration error.  Every command writes its resolved configuration to
``<out>/config.json``; outputs are byte-identical for identical inputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .corpus import (
    compute_stats,
    ensure_dir,
    ingest_transactions,
    load_catalog,
    read_catalog_records,
    read_transaction_records,
)
from .evaluation import (
    DEFAULT_KS,
    TABLE_POSITIONS,
    build_ranking_task,
    clip_positions,
    evaluate_ranking,
    model_score_fn,
    nearest_neighbors,
    random_score_fn,
    write_neighbors_tsv,
)
from .exceptions import ConfigError, SparseCFError
from .nn import (
    BagPairFeatures,
    DcfConfig,
    DcfModel,
    IndicatorPairFeatures,
    LinearModel,
    init_model,
    load_model,
    save_model,
)
from .synth import (
    DEFAULT_MULTIPLIERS,
    SyntheticConfig,
    generate_content_corpus,
    generate_feedback,
    matrix_to_stats,
    run_convergence_experiment,
    run_ratio_sweep,
    write_json,
)
from .train import PairData, TrainConfig, fit

log = logging.getLogger("sparse_cf")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(SparseCFError):
    """Bad flag combination or unknown identifier supplied by the user."""


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv_ints(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _csv_floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _common(p):
    p.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    p.add_argument("--config", type=Path, default=None, help="JSON config; flags override it")
    p.add_argument("--out", type=Path, default=None, help="output directory (default .)")
    p.add_argument("--workers", type=int, default=None, help="worker count (only 1 is supported)")


def build_parser():
    parser = _Parser(prog="sparse-cf", description="Log-cosine collaborative filtering experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-gen", help="generate a synthetic matrix summary or a content corpus")
    _common(p)
    p.add_argument("--items", type=int)
    p.add_argument("--users", type=int)
    p.add_argument("--p-low", type=float)
    p.add_argument("--p-high", type=float)
    p.add_argument("--content", action="store_true", help="emit a clustered content corpus instead")
    p.add_argument("--clusters", type=int)
    p.add_argument("--items-per-cluster", type=int)
    p.add_argument("--holdout-per-cluster", type=int)

    p = sub.add_parser("validate-objective", help="full-objective convergence to the log-cosine")
    _common(p)
    p.add_argument("--items", type=int)
    p.add_argument("--users", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--check", action="store_true", help="exit 1 unless the thresholds are met")
    p.add_argument("--max-rmse", type=float)
    p.add_argument("--min-spearman", type=float)

    p = sub.add_parser("ratio-sweep", help="Monte Carlo training at several sampling ratios")
    _common(p)
    p.add_argument("--items", type=int)
    p.add_argument("--users", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--k-cp", type=int)
    p.add_argument("--multipliers", type=_csv_floats, help="multiples of |CP|/Z^2")

    p = sub.add_parser("train", help="train a similarity model on a transactions file")
    _common(p)
    p.add_argument("--transactions", type=Path)
    p.add_argument("--catalog", type=Path)
    p.add_argument("--schema", type=Path)
    p.add_argument("--train-items", type=Path, help="file of item ids (first column) to train on")
    p.add_argument("--arch", choices=("linear", "dcf-mean", "dcf-rnn"))
    p.add_argument("--loss-mode", choices=("full", "mc", "per_seed"))
    p.add_argument("--k-cp", type=int)
    p.add_argument("--k-s", type=int)
    p.add_argument("--k-r", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--validation-fraction", type=float)
    p.add_argument("--d-emb", type=int)
    p.add_argument("--d-hidden", type=int)
    p.add_argument("--d-head", type=int)
    p.add_argument("--d-rnn", type=int)
    p.add_argument("--emb-init", type=float)
    p.add_argument("--tied", action="store_true", default=None)

    p = sub.add_parser("evaluate", help="recall@k and MRR on items disjoint from training")
    _common(p)
    p.add_argument("--model", type=Path)
    p.add_argument("--arch", choices=("model", "random"))
    p.add_argument("--transactions", type=Path)
    p.add_argument("--catalog", type=Path)
    p.add_argument("--schema", type=Path)
    p.add_argument("--train-items", type=Path)
    p.add_argument("--k", type=_csv_ints)
    p.add_argument("--pool-size", type=int)
    p.add_argument("--n-seeds", type=int)

    p = sub.add_parser("neighbors", help="items at fixed positions of the embedding-distance order")
    _common(p)
    p.add_argument("--model", type=Path)
    p.add_argument("--catalog", type=Path)
    p.add_argument("--schema", type=Path)
    p.add_argument("--item")
    p.add_argument("--positions", type=_csv_ints)
    return parser


# --------------------------------------------------------------------------
# Config resolution
# --------------------------------------------------------------------------

DEFAULTS = {
    "synth-gen": {"items": 100, "users": 10000, "p_low": 0.2, "p_high": 0.8, "content": False,
                  "clusters": 10, "items_per_cluster": 200, "holdout_per_cluster": 0},
    "validate-objective": {"items": 100, "users": 10000, "epochs": 200, "lr": 0.1, "check": False,
                           "max_rmse": 1e-3, "min_spearman": 0.999},
    "ratio-sweep": {"items": 20, "users": 10000, "epochs": 200, "lr": 3e-4, "k_cp": 100000,
                    "multipliers": list(DEFAULT_MULTIPLIERS)},
    "train": {"transactions": None, "catalog": None, "schema": None, "train_items": None,
              "arch": "dcf-mean", "loss_mode": "per_seed", "k_cp": 200000, "k_s": 0, "k_r": 4,
              "lr": 0.1, "epochs": 1000, "patience": 10, "batch_size": 1, "validation_fraction": 0.05,
              "d_emb": 200, "d_hidden": 400, "d_head": 1200, "d_rnn": 200, "emb_init": 0.5, "tied": False},
    "evaluate": {"model": None, "arch": "model", "transactions": None, "catalog": None, "schema": None,
                 "train_items": None, "k": list(DEFAULT_KS), "pool_size": 5000, "n_seeds": 100},
    "neighbors": {"model": None, "catalog": None, "schema": None, "item": None,
                  "positions": list(TABLE_POSITIONS)},
}
SHARED = {"seed": 0, "out": ".", "workers": 1}


def resolve_config(args):
    """Defaults, then the config file, then explicit flags."""
    command = args.command
    resolved = dict(SHARED)
    resolved.update(DEFAULTS[command])
    if args.config is not None:
        try:
            with open(args.config, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        section = data.pop(command, {})
        for key in list(data):
            if key in DEFAULTS and key != command:
                data.pop(key)
        data.update(section)
        unknown = sorted(set(data) - set(resolved))
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
        resolved.update(data)
    for key in resolved:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    for key, value in resolved.items():
        if isinstance(value, Path):
            resolved[key] = str(value)
    if resolved["workers"] != 1:
        raise ConfigError("only --workers 1 is supported; per-example SGD is order-sensitive")
    return resolved


def _require(cfg, *keys):
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")


def _read_item_list(path):
    items = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("item_id"):
                continue
            parts = line.split("\t")
            if len(parts) >= 3 and parts[2] != "train":
                continue
            items.append(parts[0])
    return items


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_synth_gen(cfg, out):
    if cfg["content"]:
        corpus = generate_content_corpus(
            cfg["clusters"], cfg["items_per_cluster"], cfg["users"], cfg["seed"],
            holdout_per_cluster=cfg["holdout_per_cluster"],
        )
        corpus.write(out)
        stats = compute_stats(corpus.log(corpus.train_items))
        summary = {"items": len(corpus.records), "train_items": len(corpus.train_items),
                   "holdout_items": len(corpus.holdout_items), "users": cfg["users"]}
    else:
        syn = SyntheticConfig(n_users=cfg["users"], n_items=cfg["items"], p_low=cfg["p_low"],
                              p_high=cfg["p_high"], seed=cfg["seed"])
        matrix = generate_feedback(syn)
        stats = matrix_to_stats(matrix)
        summary = {"items": cfg["items"], "users": cfg["users"], "density": matrix.density}
    summary.update({
        "total_pairs": stats.total_pairs, "total_purchases": stats.total_purchases, "z": stats.z,
        "stored_pairs": stats.n_stored_pairs,
        "cp_over_z2": stats.total_pairs / stats.z ** 2 if stats.z else None,
    })
    if stats.total_pairs == 0:
        log.warning("no co-purchases were generated")
    write_json(out / "stats.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_validate_objective(cfg, out):
    syn = SyntheticConfig(n_users=cfg["users"], n_items=cfg["items"], seed=cfg["seed"])
    report = run_convergence_experiment(syn, learning_rate=cfg["lr"], epochs=cfg["epochs"])
    report.write(out, "convergence")
    rmse, rho = report.final["rmse"], report.final["spearman"]
    print(f"final rmse={rmse} spearman={rho} (pairs with n_cp > 0)")
    if cfg["check"]:
        ok = rmse is not None and rmse <= cfg["max_rmse"] and rho >= cfg["min_spearman"]
        print("check " + ("passed" if ok else "FAILED"))
        return EXIT_OK if ok else EXIT_FAIL
    return EXIT_OK


def cmd_ratio_sweep(cfg, out):
    syn = SyntheticConfig(n_users=cfg["users"], n_items=cfg["items"], seed=cfg["seed"])
    sweep = run_ratio_sweep(syn, multipliers=cfg["multipliers"], k_cp=cfg["k_cp"],
                            learning_rate=cfg["lr"], epochs=cfg["epochs"])
    sweep.write(out)
    for row in sweep.summary()["ratios"]:
        print(f"multiplier={row['multiplier']} ratio={row['ratio']:.6g} rmse={row['rmse']} "
              f"spearman={row['spearman']} best_rmse={row['best_rmse']}")
    return EXIT_OK


def _load_training_data(cfg):
    _require(cfg, "transactions")
    records = read_transaction_records(cfg["transactions"])
    train_items = _read_item_list(cfg["train_items"]) if cfg.get("train_items") else None
    if train_items is not None:
        keep = set(train_items)
        records = [r for r in records if r[1] in keep]
    stats = compute_stats(ingest_transactions(records))
    return stats


def cmd_train(cfg, out):
    stats = _load_training_data(cfg)
    if stats.total_pairs == 0:
        raise UsageError("the training transactions contain no co-purchases")
    catalog = None
    if cfg["catalog"]:
        catalog = load_catalog(cfg["catalog"], cfg["schema"], item_ids=list(stats.items))
    elif cfg["arch"] != "linear":
        raise UsageError(f"--arch {cfg['arch']} needs --catalog")
    train_cfg = TrainConfig(
        loss_mode=cfg["loss_mode"], k_cp=cfg["k_cp"], k_s=cfg["k_s"], k_r=cfg["k_r"],
        learning_rate=cfg["lr"], max_epochs=cfg["epochs"], patience=cfg["patience"], seed=cfg["seed"],
        validation_fraction=cfg["validation_fraction"], batch_size=cfg["batch_size"],
    )
    features = catalog.feature_matrix(stats.items) if catalog is not None else None
    if cfg["arch"] == "linear":
        model = LinearModel(BagPairFeatures(catalog.vocab_sizes) if catalog else IndicatorPairFeatures(stats.n_items))
    else:
        model = init_model(DcfConfig.from_catalog(
            catalog, arch=cfg["arch"], d_emb=cfg["d_emb"], d_hidden=cfg["d_hidden"], d_head=cfg["d_head"],
            d_rnn=cfg["d_rnn"], tied=bool(cfg["tied"]), emb_init=cfg["emb_init"],
        ), cfg["seed"])
    model, history = fit(model, PairData(stats, features), train_cfg)
    history.write_csv(out / "history.csv")
    extra = {"train_items": [str(t) for t in stats.items], "arch": cfg["arch"]}
    if catalog is not None:
        extra["vocabularies"] = {name: list(vocab) for name, vocab in catalog.vocabularies.items()}
    save_model(out / "model.npz", model, extra)
    print(f"trained {cfg['arch']} for {len(history)} epochs; best monitored loss "
          f"{min((r.val_loss if r.val_loss is not None else r.train_loss) for r in history.records) if len(history) else None}")
    return EXIT_OK


def _catalog_for_model(cfg, extra):
    """Catalog whose vocabularies are exactly those the model was trained with."""
    _require(cfg, "catalog")
    catalog = load_catalog(cfg["catalog"], cfg["schema"], item_ids=extra.get("train_items"))
    vocabs = extra.get("vocabularies")
    if vocabs is not None:
        for name, tokens in vocabs.items():
            if list(catalog.vocabularies.get(name, {})) != tokens:
                raise ConfigError(f"catalog vocabulary for {name!r} differs from the model's")
    return catalog


def cmd_evaluate(cfg, out):
    _require(cfg, "transactions")
    ks = sorted(set(cfg["k"]) | {30})
    records = read_transaction_records(cfg["transactions"])
    if cfg["arch"] == "random":
        if cfg.get("train_items"):
            train_items = _read_item_list(cfg["train_items"])
        else:
            train_items = []
        score_fn = random_score_fn(cfg["seed"])
    else:
        _require(cfg, "model")
        model, extra = load_model(cfg["model"])
        train_items = extra.get("train_items", [])
        if isinstance(model, LinearModel) and not isinstance(model.featurizer, BagPairFeatures):
            raise UsageError("an indicator linear model cannot score items outside training")
        catalog = _catalog_for_model(cfg, extra)
        score_fn = model_score_fn(model, catalog)
    train = set(train_items)
    held = [r for r in records if r[1] not in train]
    eval_log = ingest_transactions(held)
    universe = sorted({r[1] for r in held})
    task = build_ranking_task(train, eval_log.copurchases, cfg["pool_size"], cfg["seed"],
                              n_seeds=cfg["n_seeds"], universe=universe)
    report = evaluate_ranking(score_fn, task, ks)
    report.write_json(out / "report.json")
    recall = ", ".join(f"recall@{k}={v:.4f}" for k, v in report.recall.items())
    print(f"seeds={report.n_seeds} pool={report.pool_size} {recall} mrr={report.mrr:.4f}")
    return EXIT_OK


def cmd_neighbors(cfg, out):
    _require(cfg, "model", "item")
    model, extra = load_model(cfg["model"])
    if not isinstance(model, DcfModel):
        raise UsageError("neighbors needs a neural model with an item embedder")
    catalog = _catalog_for_model(cfg, extra)
    if cfg["item"] not in catalog:
        raise UsageError(f"unknown item id {cfg['item']!r}")
    positions = clip_positions(cfg["positions"], len(catalog))
    rows = nearest_neighbors(model, cfg["item"], catalog, positions)
    titles = {item: " ".join(f.get("title", [])) for item, f in read_catalog_records(cfg["catalog"])}
    write_neighbors_tsv(out / "neighbors.tsv", rows, titles)
    for pos, item, dist in rows:
        print(f"{pos}\t{item}\t{titles.get(item, '')}\t{dist:.6f}")
    return EXIT_OK


COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "validate-objective": cmd_validate_objective,
    "ratio-sweep": cmd_ratio_sweep,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "neighbors": cmd_neighbors,
}


def _setup_logging():
    level = os.environ.get("SPARSE_CF_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        out = ensure_dir(cfg["out"])
        write_json(out / "config.json", {"command": args.command, **cfg})
        return COMMANDS[args.command](cfg, out)
    except (ConfigError, UsageError) as exc:
        print(f"sparse-cf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SparseCFError, OSError) as exc:
        print(f"sparse-cf: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
