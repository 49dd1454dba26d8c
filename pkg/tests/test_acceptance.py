"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line.  The slow ones
(convergence, ratio sweep, content model) take minutes on one core.
"""
import itertools
import math
import time

import numpy as np
import pytest

from sparse_cf.corpus import CooccurrenceStats, compute_stats, cosine_oracle
from sparse_cf.evaluation import (
    build_ranking_task,
    evaluate_ranking,
    model_score_fn,
    random_mrr,
    random_recall,
    mrr,
    recall_at_k,
    spearman,
)
from sparse_cf.nn import DcfConfig, DcfModel, init_model
from sparse_cf.objective import optimal_h, pair_loss
from sparse_cf.synth import SyntheticConfig, generate_content_corpus, run_convergence_experiment, run_ratio_sweep
from sparse_cf.train import PairData, TrainConfig, fit

from test_evaluation import brute_spearman
from test_nn import dcf_gradient_error, linear_gradient_error
from test_objective import golden_max

# content-model experiment
POOL_SIZE = 2000
N_SEEDS = 250
HOLDOUT_PER_CLUSTER = 250
CONTENT_TRAIN = dict(loss_mode="per_seed", k_cp=20000, k_r=4, learning_rate=0.3, batch_size=16,
                     max_epochs=30, patience=0, restore_best=False, validation_fraction=0.05)
CONTENT_MODEL = dict(d_emb=32, d_hidden=64, d_head=64, tied=True, emb_init=8.0)


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail

    return emit


def test_criterion_1_optimum_oracle(report):
    a, b, c = np.meshgrid(np.arange(1, 51), np.arange(1, 51), np.arange(1, 51), indexing="ij")
    keep = a <= np.minimum(b, c)
    a, b, c = a[keep].astype(float), b[keep].astype(float), c[keep].astype(float)
    found = golden_max(lambda h: pair_loss(h, a, b, c), np.full(a.shape, -6.0), np.full(a.shape, 1.0))
    closed = np.array([optimal_h(int(x), int(y), int(z)) for x, y, z in zip(a, b, c)])
    err_h = float(np.max(np.abs(found - closed)))
    err_cos = 0.0
    for x, y, z, h in zip(a.astype(int), b.astype(int), c.astype(int), closed):
        stats = CooccurrenceStats(["s", "r"], [y, z], [0], [1], [x])
        err_cos = max(err_cos, abs(math.exp(h) - cosine_oracle(stats, "s", "r")))
    report(1, err_h < 1e-6 and err_cos < 1e-12,
           f"tuples={a.size} max|golden-optimal_h|={err_h:.2e} max|exp(h)-cosine|={err_cos:.2e}")


def convergence_report():
    return run_convergence_experiment(SyntheticConfig(n_items=100, n_users=10000, seed=0),
                                      learning_rate=0.1, epochs=200)


def test_criterion_2_synthetic_convergence(report):
    t = time.time()
    rep = convergence_report()
    rmse, rho = rep.final["rmse"], rep.final["spearman"]
    report(2, rho >= 0.999 and rmse <= 1e-3,
           f"rmse={rmse:.3e} spearman={rho:.6f} epochs={len(rep.history)} ({time.time() - t:.0f}s)")


def shift_sweep():
    return run_ratio_sweep(SyntheticConfig(n_items=50, n_users=10000, seed=0), multipliers=(0.1, 1.0, 10.0),
                           k_cp=100000, learning_rate=0.01, epochs=200)


def test_criterion_3_mc_shift(report):
    t = time.time()
    sweep = shift_sweep()
    errors = {m: r.final["median_shift_error"] for m, r in sweep.reports.items()}
    ok = abs(errors[1.0]) <= 0.05 and all(abs(e) <= 0.15 for e in errors.values())
    detail = " ".join(f"{m}x:{e:+.4f}" for m, e in errors.items())
    report(3, ok, f"median(h - log cos) - shift: {detail} ({time.time() - t:.0f}s)")


def ratio_sweep():
    return run_ratio_sweep(SyntheticConfig(n_items=20, n_users=10000, seed=0),
                           k_cp=100000, learning_rate=3e-4, epochs=200)


def test_criterion_4_ratio_sweep(report):
    t = time.time()
    sweep = ratio_sweep()
    final = {m: r.final["rmse"] for m, r in sweep.reports.items()}
    epochs = {m: r.epochs_to_spearman(0.99) for m, r in sweep.reports.items()}
    matched = final[1.0]
    lowest = min(final, key=final.get) == 1.0
    over = [m for m in final if m < 1 and epochs[m] is not None and (epochs[1.0] is None or epochs[m] < epochs[1.0])]
    under = [m for m in final if m > 1 and final[m] >= 2 * matched]
    detail = " ".join(f"{m}x:rmse={final[m]:.4g},ep99={epochs[m]}" for m in final)
    report(4, lowest and bool(over) and bool(under), f"{detail} ({time.time() - t:.0f}s)")


def test_criterion_5_gradients(report):
    errors = {
        "linear": max(linear_gradient_error(s, "indicator" if s % 2 else "bag") for s in range(20)),
        "dcf-mean": max(dcf_gradient_error(s, "dcf-mean") for s in range(20)),
        "dcf-rnn": max(dcf_gradient_error(100 + s, "dcf-rnn") for s in range(20)),
    }
    report(5, all(e < 1e-4 for e in errors.values()),
           " ".join(f"{k}:max_rel={v:.2e}" for k, v in errors.items()))


def test_criterion_6_metric_oracles(report):
    r30 = recall_at_k([1, 2, 31], 30)
    m = mrr([1, 2, 4])
    worst = 0.0
    rng = np.random.default_rng(0)
    for n in range(2, 9):
        grid = [t for t in itertools.product((1, 2, 3), repeat=n) if len(set(t)) > 1]
        partners = [grid[k] for k in rng.choice(len(grid), size=min(len(grid), 5), replace=False)]
        for xs in grid:
            for ys in partners:
                worst = max(worst, abs(spearman(xs, ys) - brute_spearman(xs, ys)))
    ok = abs(r30 - 2 / 3) < 1e-12 and abs(m - 7 / 12) < 1e-12 and worst < 1e-12
    report(6, ok, f"recall@30={r30:.6f} mrr={m:.6f} spearman_max_err={worst:.1e}")


def content_experiment(max_epochs=None):
    """Train DCF-Mean on the clustered corpus and rank held-out co-purchases."""
    corpus = generate_content_corpus(10, 200, 5000, seed=0, holdout_per_cluster=HOLDOUT_PER_CLUSTER)
    catalog = corpus.catalog()
    stats = compute_stats(corpus.log(corpus.train_items))
    held = corpus.log(corpus.holdout_items)
    task = build_ranking_task(corpus.train_items, held.copurchases, POOL_SIZE, 0,
                              n_seeds=N_SEEDS, universe=corpus.holdout_items)
    config = DcfConfig.from_catalog(catalog, arch="dcf-mean", **CONTENT_MODEL)
    train_cfg = dict(CONTENT_TRAIN)
    if max_epochs is not None:
        train_cfg["max_epochs"] = max_epochs
    model, history = fit(init_model(config, 0), PairData(stats, catalog.feature_matrix(stats.items)),
                         TrainConfig(**train_cfg))
    trained = evaluate_ranking(model_score_fn(model, catalog), task)
    untrained = evaluate_ranking(model_score_fn(DcfModel(config), catalog), task)
    return trained, untrained, history


def test_criterion_7_content_model(report):
    t = time.time()
    trained, zero, _ = content_experiment()
    base_r, base_m = random_recall(30, POOL_SIZE), random_mrr(POOL_SIZE)
    r30, m = trained.recall[30], trained.mrr
    ok = (r30 >= 5 * base_r and m >= 5 * base_m and r30 > zero.recall[30] and m > zero.mrr
          and time.time() - t <= 3600)
    report(7, ok, f"recall@30={r30:.3f} (5x random {5 * base_r:.4f}, theta=0 {zero.recall[30]:.3f}) "
                  f"mrr={m:.4f} (5x random {5 * base_m:.4f}, theta=0 {zero.mrr:.4f}) ({time.time() - t:.0f}s)")


def test_criterion_8_determinism(report, tmp_path):
    """Reduced versions of criteria 2-7 run twice; their report files must match byte for byte."""
    runs = {
        "convergence": lambda out: run_convergence_experiment(
            SyntheticConfig(n_items=30, n_users=2000, seed=5), epochs=20).write(out, "convergence"),
        "sweep": lambda out: run_ratio_sweep(
            SyntheticConfig(n_items=12, n_users=2000, seed=5), k_cp=5000, learning_rate=3e-4, epochs=10).write(out),
        "content": lambda out: content_experiment(max_epochs=1)[0].write_json(out / "report.json"),
    }
    mismatched = []
    for name, run in runs.items():
        dirs = []
        for k in range(2):
            out = tmp_path / f"{name}{k}"
            out.mkdir()
            run(out)
            dirs.append(out)
        files = sorted(p.name for p in dirs[0].iterdir())
        for f in files:
            if (dirs[0] / f).read_bytes() != (dirs[1] / f).read_bytes():
                mismatched.append(f"{name}/{f}")
    report(8, not mismatched, f"compared {', '.join(runs)}; mismatched: {mismatched or 'none'}")
