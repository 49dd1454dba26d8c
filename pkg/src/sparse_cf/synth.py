"""Synthetic implicit feedback and the objective-validation experiments.

Two generators live here:

* a Bernoulli feedback matrix, ``p_i ~ U(p_low, p_high)`` per item and
  ``r_ui ~ Bernoulli(p_i)``, whose co-purchases are all ordered pairs
  ``i != j`` bought by the same user;
* a clustered content corpus: items carry cluster-correlated title and bag
  tokens, and users buy mostly within a preferred sub-cluster.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .corpus import (
    CooccurrenceStats,
    FeatureSetSpec,
    build_catalog,
    ingest_transactions,
    write_catalog_records,
    write_schema,
    write_transactions,
)
from .evaluation import rmse, spearman
from .exceptions import ConfigError, DomainError
from .nn import IndicatorPairFeatures, LinearModel
from .objective import mc_shift
from .train import PairData, TrainConfig, TrainHistory, fit, score_positions
from .sampling import make_rng

FEEDBACK_STREAM = 7
CORPUS_STREAM = 8
DEFAULT_MULTIPLIERS = (0.1, 0.5, 1.0, 2.0, 10.0)


@dataclass
class SyntheticConfig:
    n_users: int = 10000
    n_items: int = 100
    p_low: float = 0.2
    p_high: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.n_users < 1 or self.n_items < 1:
            raise ConfigError("n_users and n_items must be >= 1")
        if not 0 <= self.p_low <= self.p_high <= 1:
            raise ConfigError("need 0 <= p_low <= p_high <= 1")


@dataclass
class FeedbackMatrix:
    bits: np.ndarray
    item_probs: np.ndarray

    @property
    def density(self):
        return float(self.bits.mean()) if self.bits.size else 0.0


def generate_feedback(config: SyntheticConfig) -> FeedbackMatrix:
    rng = make_rng(config.seed, FEEDBACK_STREAM)
    p = rng.uniform(config.p_low, config.p_high, size=config.n_items)
    bits = (rng.random((config.n_users, config.n_items)) < p).astype(np.uint8)
    return FeedbackMatrix(bits, p)


def matrix_to_stats(m: FeedbackMatrix) -> CooccurrenceStats:
    """Counts over all ordered pairs ``i != j``; item ids are column indices."""
    b = m.bits.astype(np.int64)
    co = b.T @ b
    n = co.shape[0]
    np.fill_diagonal(co, 0)
    seeds, cands = np.nonzero(co)
    return CooccurrenceStats(range(n), b.sum(axis=0), seeds, cands, co[seeds, cands])


def indicator_features(n_items) -> IndicatorPairFeatures:
    return IndicatorPairFeatures(n_items)


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


def oracle_metrics(h, stats: CooccurrenceStats, shift=0.0):
    """Agreement of scores ``h`` (aligned with stored pairs) with the cosine oracle.

    ``rmse`` compares ``exp(h)`` with the cosine, ``rmse_shifted`` with the
    cosine scaled by ``exp(shift)``, ``rmse_log`` compares ``h - shift`` with
    the log-cosine.  Only pairs with ``n_CP > 0`` enter.
    """
    cos = stats.pair_cosines()
    h = np.asarray(h, dtype=np.float64)
    try:
        rho = spearman(h, cos)
    except DomainError:
        rho = 0.0
    return {
        "rmse": rmse(np.exp(h), cos),
        "rmse_shifted": rmse(np.exp(h), cos * math.exp(shift)),
        "rmse_log": rmse(h - shift, np.log(cos)),
        "spearman": rho,
        "median_shift": float(np.median(h - np.log(cos))),
    }


@dataclass
class ConvergenceReport:
    """Per-epoch agreement with the oracle plus final values.

    Metrics cover co-purchased pairs only (``n_CP > 0``); the optimum is
    ``-inf`` elsewhere.
    """

    history: TrainHistory
    final: dict
    settings: dict = field(default_factory=dict)
    per_epoch: dict = field(default_factory=dict)

    def epochs_to_spearman(self, threshold=0.99):
        for rec in self.history.records:
            if rec.spearman is not None and rec.spearman >= threshold:
                return rec.epoch
        return None

    def summary(self):
        out = dict(self.settings)
        out.update(self.final)
        out["epochs"] = len(self.history)
        out["epochs_to_spearman_0.99"] = self.epochs_to_spearman(0.99)
        out["pairs"] = "n_cp > 0 only"
        return out

    def write(self, out_dir, stem):
        out_dir = Path(out_dir)
        self.history.write_csv(out_dir / f"{stem}.csv")
        write_json(out_dir / f"{stem}.json", self.summary())


def write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def _linear_run(stats, train_cfg, shift=0.0):
    model = LinearModel(indicator_features(stats.n_items))
    data = PairData(stats)
    extra = {"rmse_log": [], "rmse_shifted": [], "median_shift": []}

    def monitor(m):
        metrics = oracle_metrics(score_positions(m, data, stats.pair_seeds, stats.pair_cands), stats, shift)
        for key in extra:
            extra[key].append(metrics[key])
        return metrics["rmse"], metrics["spearman"]

    model, history = fit(model, data, train_cfg, monitor=monitor)
    if len(history):
        final = oracle_metrics(score_positions(model, data, stats.pair_seeds, stats.pair_cands), stats, shift)
    else:
        final = {"rmse": None, "rmse_shifted": None, "rmse_log": None, "spearman": None, "median_shift": None}
    return model, history, final, extra


def run_convergence_experiment(config: SyntheticConfig, learning_rate=0.1, epochs=200, weight_scale=None):
    """Full-objective SGD on the indicator linear model; returns a :class:`ConvergenceReport`."""
    stats = matrix_to_stats(generate_feedback(config))
    train_cfg = TrainConfig(
        loss_mode="full", learning_rate=learning_rate, max_epochs=epochs, patience=0,
        seed=config.seed, validation_fraction=0.0, weight_scale=weight_scale, restore_best=False,
    )
    model, history, final, extra = _linear_run(stats, train_cfg)
    settings = {
        "n_items": config.n_items, "n_users": config.n_users, "seed": config.seed,
        "learning_rate": learning_rate, "loss_mode": "full",
        "total_pairs": stats.total_pairs, "z": stats.z,
        "density": stats.total_purchases / (config.n_items * config.n_users),
    }
    return ConvergenceReport(history, final, settings, extra)


def ratio_counts(k_cp, target_ratio):
    """``k_s = k_r`` giving ``k_cp / (k_s k_r)`` closest to ``target_ratio``."""
    k = max(1, int(round(math.sqrt(k_cp / target_ratio))))
    return k, k


@dataclass
class SweepReport:
    matched_ratio: float
    reports: dict

    def summary(self):
        finals = {m: r.final["rmse"] for m, r in self.reports.items()}
        best = min(finals, key=finals.get)
        rows = []
        for m, rep in self.reports.items():
            row = rep.summary()
            row["multiplier"] = m
            row["best_rmse"] = m == best
            rows.append(row)
        return {"matched_ratio": self.matched_ratio, "ratios": rows}

    def write(self, out_dir):
        out_dir = Path(out_dir)
        for m, rep in self.reports.items():
            rep.history.write_csv(out_dir / f"ratio_{ratio_label(rep.settings['ratio'])}.csv")
        write_json(out_dir / "sweep_summary.json", self.summary())


def ratio_label(ratio):
    return format(ratio, ".6g")


def run_ratio_sweep(config: SyntheticConfig, multipliers=DEFAULT_MULTIPLIERS, k_cp=100000,
                    learning_rate=3e-4, epochs=200, ratios=None):
    """Monte Carlo training of the indicator model at several positive/negative ratios.

    Each setting uses ``k_s = k_r`` chosen so that ``k_cp / (k_s k_r)`` is
    closest to ``multiplier * |CP| / Z^2``, unless explicit ``ratios`` triples
    ``(k_cp, k_s, k_r)`` are given.  The recorded shift uses the realised ratio.
    """
    stats = matrix_to_stats(generate_feedback(config))
    matched = stats.total_pairs / stats.z ** 2
    if ratios is None:
        ratios = []
        for m in multipliers:
            ratios.append((m, (k_cp, *ratio_counts(k_cp, m * matched))))
    else:
        ratios = [(kc / (ks * kr) / matched, (kc, ks, kr)) for kc, ks, kr in ratios]
    reports = {}
    for m, (kc, ks, kr) in ratios:
        shift = mc_shift(kc, ks, kr, stats.z, stats.total_pairs)
        train_cfg = TrainConfig(
            loss_mode="mc", k_cp=kc, k_s=ks, k_r=kr, learning_rate=learning_rate, max_epochs=epochs,
            patience=0, seed=config.seed, validation_fraction=0.0, restore_best=False,
        )
        _, history, final, extra = _linear_run(stats, train_cfg, shift)
        final["median_shift_error"] = None if final["median_shift"] is None else final["median_shift"] - shift
        settings = {
            "n_items": config.n_items, "n_users": config.n_users, "seed": config.seed,
            "learning_rate": learning_rate, "k_cp": kc, "k_s": ks, "k_r": kr,
            "ratio": kc / (ks * kr), "shift": shift,
        }
        reports[m] = ConvergenceReport(history, final, settings, extra)
    return SweepReport(matched, reports)


# --------------------------------------------------------------------------
# Content corpus
# --------------------------------------------------------------------------


@dataclass
class ContentCorpusConfig:
    n_clusters: int = 10
    items_per_cluster: int = 200
    n_users: int = 5000
    holdout_per_cluster: int = 0
    subclusters: int = 20
    p_subcluster: float = 0.7
    p_cluster: float = 0.2
    mean_purchases: float = 8.0
    title_length: int = 5
    seed: int = 0

    def __post_init__(self):
        for name in ("n_clusters", "items_per_cluster", "n_users", "subclusters", "title_length"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.holdout_per_cluster < 0:
            raise ConfigError("holdout_per_cluster must be >= 0")
        if not (0 <= self.p_subcluster and 0 <= self.p_cluster and self.p_subcluster + self.p_cluster <= 1):
            raise ConfigError("preference probabilities must be nonnegative and sum to at most 1")


CONTENT_SCHEMA = (FeatureSetSpec("title", sequential=True), FeatureSetSpec("category"), FeatureSetSpec("brand"))


@dataclass
class ContentCorpus:
    records: list
    transactions: list
    train_items: list
    holdout_items: list
    clusters: dict
    schema: tuple = CONTENT_SCHEMA

    def catalog(self):
        """Vocabulary from training items; holdout items are tokenised against it."""
        train = set(self.train_items)
        catalog = build_catalog([r for r in self.records if r[0] in train], self.schema)
        for item_id, features in self.records:
            if item_id not in train:
                catalog.add(item_id, features)
        return catalog

    def log(self, items=None):
        """Transaction log restricted to ``items`` (all items if None)."""
        keep = None if items is None else set(items)
        return ingest_transactions(r for r in self.transactions if keep is None or r[1] in keep)

    def write(self, out_dir):
        out_dir = Path(out_dir)
        write_catalog_records(out_dir / "catalog.jsonl", self.records)
        write_schema(out_dir / "schema.tsv", self.schema)
        write_transactions(out_dir / "transactions.tsv", self.transactions)
        with open(out_dir / "items.tsv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write("item_id\tcluster\tsplit\n")
            holdout = set(self.holdout_items)
            for item_id, _ in self.records:
                fh.write(f"{item_id}\t{self.clusters[item_id]}\t{'holdout' if item_id in holdout else 'train'}\n")


def generate_content_corpus(n_clusters=10, items_per_cluster=200, users=5000, seed=0, **kwargs) -> ContentCorpus:
    """Clustered items with correlated tokens and users who shop near a home sub-cluster.

    Each user picks a home cluster and sub-cluster.  Every purchase comes from
    the home sub-cluster with probability ``p_subcluster``, from elsewhere in
    the home cluster with probability ``p_cluster``, and otherwise uniformly
    from the whole catalog.  Timestamps follow purchase order.
    """
    cfg = ContentCorpusConfig(n_clusters=n_clusters, items_per_cluster=items_per_cluster,
                              n_users=users, seed=seed, **kwargs)
    rng = make_rng(cfg.seed, CORPUS_STREAM)
    per_cluster = cfg.items_per_cluster + cfg.holdout_per_cluster
    n_items = cfg.n_clusters * per_cluster
    width = len(str(n_items - 1))
    ids = [f"i{k:0{width}d}" for k in range(n_items)]
    cluster_of = np.repeat(np.arange(cfg.n_clusters), per_cluster)
    local = np.tile(np.arange(per_cluster), cfg.n_clusters)
    sub_of = rng.integers(0, cfg.subclusters, size=n_items)
    holdout_mask = local >= cfg.items_per_cluster

    n_global, n_cluster_words, n_sub_words = 40, 12, 4
    records = []
    for k in range(n_items):
        c, s = int(cluster_of[k]), int(sub_of[k])
        title = []
        for _ in range(cfg.title_length):
            u = rng.random()
            if u < 0.4:
                title.append(f"c{c}s{s}w{int(rng.integers(n_sub_words))}")
            elif u < 0.8:
                title.append(f"c{c}w{int(rng.integers(n_cluster_words))}")
            else:
                title.append(f"g{int(rng.integers(n_global))}")
        brand = f"b{c}_{s}" if rng.random() < 0.7 else f"b{c}_{int(rng.integers(cfg.subclusters))}"
        records.append((ids[k], {"title": title, "category": [f"cat{c}"], "brand": [brand]}))

    members = {}
    for k in range(n_items):
        members.setdefault((int(cluster_of[k]), int(sub_of[k])), []).append(k)
    cluster_members = [np.flatnonzero(cluster_of == c) for c in range(cfg.n_clusters)]

    transactions = []
    for u in range(cfg.n_users):
        c = int(rng.integers(cfg.n_clusters))
        s = int(rng.integers(cfg.subclusters))
        home = members.get((c, s))
        n_buy = 2 + int(rng.poisson(max(cfg.mean_purchases - 2, 0)))
        for t in range(n_buy):
            v = rng.random()
            if v < cfg.p_subcluster and home:
                k = home[int(rng.integers(len(home)))]
            elif v < cfg.p_subcluster + cfg.p_cluster:
                k = int(cluster_members[c][int(rng.integers(len(cluster_members[c])))])
            else:
                k = int(rng.integers(n_items))
            transactions.append((f"u{u:05d}", ids[k], t))
    return ContentCorpus(
        records=records,
        transactions=transactions,
        train_items=[ids[k] for k in range(n_items) if not holdout_mask[k]],
        holdout_items=[ids[k] for k in range(n_items) if holdout_mask[k]],
        clusters={ids[k]: int(cluster_of[k]) for k in range(n_items)},
    )
