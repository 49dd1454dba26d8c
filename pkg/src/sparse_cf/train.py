"""Per-example SGD on the log-cosine objective, with early stopping.

Every mode reduces an epoch to a list of examples ``(seed, candidate,
pos_w, neg_w)`` whose minimised loss is
``-(pos_w * log s(h) + neg_w * log s(-h))``:

* ``full``: one example per ordered item pair carrying both the co-purchase
  and the grid term of that pair, scaled by ``weight_scale``
  (default ``1 / sqrt(|D|)``);
* ``mc``: a fresh sample of ``k_cp`` positives and ``k_s * k_r`` negatives;
* ``per_seed``: ``k_cp`` positives, each with ``k_r`` negatives for its seed.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Optional

import numpy as np
from numba import njit

from .corpus import CooccurrenceStats, FeatureMatrix
from .exceptions import ConfigError, TrainingError
from .nn import DcfModel, LinearModel, apply_gradients
from .objective import log_sigmoid, sigmoid
from .sampling import (
    ITEM_STREAM,
    ORDER_STREAM,
    PAIR_STREAM,
    SPLIT_STREAM,
    VALIDATION_STREAM,
    build_item_sampler,
    build_pair_sampler,
    derive_seed,
    make_rng,
    sample_mc_batch,
    sample_per_seed_batch,
)

log = logging.getLogger(__name__)

LOSS_MODES = ("full", "mc", "per_seed")
MAX_FULL_PAIRS = 10**7


@dataclass
class TrainConfig:
    loss_mode: str = "per_seed"
    k_cp: int = 200000
    k_s: int = 0
    k_r: int = 4
    learning_rate: float = 0.1
    max_epochs: int = 1000
    patience: int = 10
    min_delta: float = 1e-5
    seed: int = 0
    validation_fraction: float = 0.05
    batch_size: int = 1
    weight_scale: Optional[float] = None
    max_validation_pairs: int = 20000
    restore_best: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.loss_mode == "mc" and (self.k_cp <= 0 or self.k_s < 0 or self.k_r < 0):
            raise ConfigError("mc mode needs k_cp > 0 and nonnegative k_s, k_r")
        if self.loss_mode == "per_seed" and (self.k_cp <= 0 or self.k_r < 0):
            raise ConfigError("per_seed mode needs k_cp > 0 and k_r >= 0")
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise ConfigError("learning_rate must be a finite nonnegative number")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be >= 0")
        if not 0 <= self.validation_fraction < 1:
            raise ConfigError("validation_fraction must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.weight_scale is not None and self.weight_scale <= 0:
            raise ConfigError("weight_scale must be positive")

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown training keys: {', '.join(unknown)}")
        return cls(**data)

    def to_dict(self):
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: Optional[float] = None
    rmse: Optional[float] = None
    spearman: Optional[float] = None


def _fmt(x):
    return "" if x is None else format(float(x), ".12g")


class TrainHistory:
    """Per-epoch records, written as ``epoch,train_loss,val_loss,rmse,spearman``."""

    columns = ("epoch", "train_loss", "val_loss", "rmse", "spearman")

    def __init__(self, records=None):
        self.records = list(records or [])

    def append(self, record: EpochRecord):
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, k):
        return self.records[k]

    def column(self, name):
        return [getattr(r, name) for r in self.records]

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.columns)
            for r in self.records:
                writer.writerow([r.epoch, _fmt(r.train_loss), _fmt(r.val_loss), _fmt(r.rmse), _fmt(r.spearman)])


@dataclass
class PairData:
    """Training statistics plus, for content models, features aligned to item positions."""

    stats: CooccurrenceStats
    features: Optional[FeatureMatrix] = None


# --------------------------------------------------------------------------
# Scoring and SGD kernels
# --------------------------------------------------------------------------


def score_positions(model, data: PairData, seeds, cands, chunk=8192):
    """``h`` for item-position pairs, evaluated in chunks."""
    seeds = np.asarray(seeds, dtype=np.int64)
    cands = np.asarray(cands, dtype=np.int64)
    if isinstance(model, LinearModel):
        return model.score_indices(seeds, cands, data.features)
    if data.features is None:
        raise ConfigError("content model needs item features")
    out = np.empty(seeds.shape[0])
    for start in range(0, seeds.shape[0], chunk):
        sl = slice(start, start + chunk)
        out[sl] = model.score_batches(data.features.take(seeds[sl]), data.features.take(cands[sl]))
    return out


def example_loss(h, pos_w, neg_w):
    """Minimised per-example loss ``-(pos_w log s(h) + neg_w log s(-h))``."""
    return -(pos_w * log_sigmoid(h) + neg_w * log_sigmoid(-h))


@njit(cache=True)
def _linear_sgd(theta, indptr, indices, pos_w, neg_w, order, lr):
    total = 0.0
    for e in order:
        h = 0.0
        for k in range(indptr[e], indptr[e + 1]):
            h += theta[indices[k]]
        if not np.isfinite(h):
            return total, e
        if h >= 0:
            ex = math.exp(-h)
            sig_pos = 1.0 / (1.0 + ex)
            sig_neg = ex / (1.0 + ex)
        else:
            ex = math.exp(h)
            sig_pos = ex / (1.0 + ex)
            sig_neg = 1.0 / (1.0 + ex)
        ls_pos = min(h, 0.0) - math.log1p(math.exp(-abs(h)))
        ls_neg = min(-h, 0.0) - math.log1p(math.exp(-abs(h)))
        total -= pos_w[e] * ls_pos + neg_w[e] * ls_neg
        step = lr * (pos_w[e] * sig_neg - neg_w[e] * sig_pos)
        for k in range(indptr[e], indptr[e + 1]):
            theta[indices[k]] += step
    return total, -1


def _param_norms(model):
    return {name: float(np.linalg.norm(p)) for name, p in model.params.items()}


def _non_finite(model, seed, cand, h):
    return TrainingError(
        f"non-finite loss at example (seed={int(seed)}, candidate={int(cand)}), h={h}; "
        f"parameter norms {_param_norms(model)}"
    )


def sgd_pass(model, data, seeds, cands, pos_w, neg_w, order, lr, batch_size=1):
    """One pass over the examples in ``order``; returns the summed pre-update loss."""
    seeds = np.asarray(seeds, dtype=np.int64)
    cands = np.asarray(cands, dtype=np.int64)
    pos_w = np.asarray(pos_w, dtype=np.float64)
    neg_w = np.asarray(neg_w, dtype=np.float64)
    if isinstance(model, LinearModel) and batch_size == 1:
        indptr, indices = model.featurizer.encode_pairs(seeds, cands, data.features)
        total, bad = _linear_sgd(model.theta, indptr, indices, pos_w, neg_w, np.asarray(order, np.int64), lr)
        if bad >= 0 or not math.isfinite(total):
            e = int(bad) if bad >= 0 else int(order[-1])
            raise _non_finite(model, seeds[e], cands[e], "nan")
        return float(total)
    total = 0.0
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        if isinstance(model, LinearModel):
            h, cache = model.forward_csr(*model.featurizer.encode_pairs(seeds[idx], cands[idx], data.features))
        else:
            h, cache = model.forward(data.features.take(seeds[idx]), data.features.take(cands[idx]))
        loss = float(np.sum(example_loss(h, pos_w[idx], neg_w[idx])))
        if not math.isfinite(loss):
            raise _non_finite(model, seeds[idx[0]], cands[idx[0]], h)
        total += loss
        upstream = -(pos_w[idx] * sigmoid(-h) - neg_w[idx] * sigmoid(h)) / len(idx)
        apply_gradients(model.params, model.backward(cache, upstream), lr)
    return total


# --------------------------------------------------------------------------
# Epoch state
# --------------------------------------------------------------------------


class TrainingState:
    """Samplers, RNG streams and the validation split of one training run."""

    def __init__(self, data: PairData, config: TrainConfig):
        self.data = data
        self.config = config
        self.order_rng = make_rng(config.seed, ORDER_STREAM)
        stats = data.stats
        self.validation = None
        if config.loss_mode == "full":
            n = stats.n_items
            if n * n > MAX_FULL_PAIRS:
                raise ConfigError(f"full mode over {n} items exceeds {MAX_FULL_PAIRS} pair examples")
            self.train_stats = stats
            self._full = self._full_examples(stats, config)
            return
        train_stats = stats
        if config.validation_fraction > 0 and stats.n_stored_pairs > 1:
            train_stats, self.validation = self._split(stats, config)
        self.train_stats = train_stats
        self.pair_sampler = build_pair_sampler(train_stats, derive_seed(config.seed, PAIR_STREAM))
        self.item_sampler = build_item_sampler(stats, derive_seed(config.seed, ITEM_STREAM))

    @staticmethod
    def _full_examples(stats, config):
        n = stats.n_items
        scale = config.weight_scale or 1.0 / math.sqrt(max(stats.total_purchases, 1))
        counts = stats.dense_pair_counts().astype(np.float64).reshape(-1)
        sq = np.sqrt(stats.item_counts.astype(np.float64))
        grid = np.outer(sq, sq).reshape(-1)
        seeds, cands = np.divmod(np.arange(n * n, dtype=np.int64), n)
        return seeds, cands, scale * counts, scale * grid

    @staticmethod
    def _split(stats, config):
        rng = make_rng(config.seed, SPLIT_STREAM)
        n = stats.n_stored_pairs
        n_val = max(1, int(round(config.validation_fraction * n)))
        n_val = min(n_val, n - 1, config.max_validation_pairs)
        held = np.zeros(n, dtype=bool)
        held[rng.choice(n, size=n_val, replace=False)] = True
        train_stats = stats.restrict_pairs(~held)
        v_seeds = stats.pair_seeds[held]
        v_cands = stats.pair_cands[held]
        v_counts = stats.pair_counts[held].astype(np.float64)
        k_r = max(config.k_r, 1)
        item_sampler = build_item_sampler(stats, derive_seed(config.seed, VALIDATION_STREAM))
        neg_cands = item_sampler.draw(n_val * k_r)
        neg_seeds = np.repeat(v_seeds, k_r)
        neg_w = np.repeat(v_counts, k_r)
        seeds = np.concatenate([v_seeds, neg_seeds])
        cands = np.concatenate([v_cands, neg_cands])
        pos_w = np.concatenate([v_counts, np.zeros(neg_w.shape[0])])
        neg = np.concatenate([np.zeros(n_val), neg_w])
        return train_stats, (seeds, cands, pos_w, neg, float(v_counts.sum()))

    def epoch_examples(self):
        cfg = self.config
        if cfg.loss_mode == "full":
            return self._full
        if cfg.loss_mode == "mc":
            batch = sample_mc_batch(self.pair_sampler, self.item_sampler, cfg.k_cp, cfg.k_s, cfg.k_r)
        else:
            batch = sample_per_seed_batch(self.pair_sampler, self.item_sampler, cfg.k_cp, cfg.k_r)
        seeds, cands, labels = batch.examples()
        pos = labels.astype(np.float64)
        return seeds, cands, pos, 1.0 - pos

    def validation_loss(self, model):
        if self.validation is None:
            return None
        seeds, cands, pos_w, neg_w, norm = self.validation
        h = score_positions(model, self.data, seeds, cands)
        return float(np.sum(example_loss(h, pos_w, neg_w)) / norm)

    def full_objective(self, model):
        """Minimised full objective ``-l`` evaluated at the current parameters."""
        seeds, cands, pos_w, neg_w = self._full
        scale = self.config.weight_scale or 1.0 / math.sqrt(max(self.data.stats.total_purchases, 1))
        h = score_positions(model, self.data, seeds, cands)
        return float(np.sum(example_loss(h, pos_w, neg_w)) / scale)


def train_epoch(model, data: PairData, config: TrainConfig, state: TrainingState | None = None, epoch=1):
    """Run one epoch and return its :class:`EpochRecord` (metrics unset)."""
    state = state or TrainingState(data, config)
    seeds, cands, pos_w, neg_w = state.epoch_examples()
    order = state.order_rng.permutation(seeds.shape[0])
    online = sgd_pass(model, data, seeds, cands, pos_w, neg_w, order, config.learning_rate, config.batch_size)
    if config.loss_mode == "full":
        train_loss = state.full_objective(model)
    else:
        train_loss = online / max(seeds.shape[0], 1)
    return EpochRecord(epoch=epoch, train_loss=train_loss, val_loss=state.validation_loss(model))


def fit(model, data: PairData, config: TrainConfig, monitor: Callable | None = None):
    """Train with early stopping on validation loss (training loss when there is no split).

    ``monitor(model)`` may return ``(rmse, spearman)`` to be logged per epoch.
    Returns the model and the history; with ``restore_best`` the model holds
    the parameters of the best-monitored epoch, otherwise the last ones.
    """
    history = TrainHistory()
    if config.max_epochs == 0:
        return model, history
    state = TrainingState(data, config)
    best_loss = math.inf
    best_params = model.copy_params()
    wait = 0
    for epoch in range(1, config.max_epochs + 1):
        record = train_epoch(model, data, config, state, epoch)
        if monitor is not None:
            record.rmse, record.spearman = monitor(model)
        history.append(record)
        signal = record.val_loss if record.val_loss is not None else record.train_loss
        log.info("epoch %d train %.6g val %s", epoch, record.train_loss, _fmt(record.val_loss))
        if signal < best_loss - config.min_delta:
            best_loss = signal
            best_params = model.copy_params()
            wait = 0
        else:
            wait += 1
            if config.patience > 0 and wait >= config.patience:
                log.info("early stop at epoch %d", epoch)
                break
    if config.restore_best:
        model.set_params(best_params)
    return model, history
