"""Log-cosine objective: losses, gradients and closed-form optima.

Sign convention
---------------
``pair_loss``, ``full_loss`` and ``mc_loss`` return the weighted
log-likelihood exactly as written in the objective, i.e. a quantity that is
*maximised* (always <= 0).  Training minimises its negation; every
``loss_gradient_wrt_h`` value is likewise the ascent direction, and the
optimiser steps ``theta <- theta - lr * (-grad)``.
"""
from __future__ import annotations

import math
from functools import total_ordering

import numpy as np

from .exceptions import DomainError

DEFAULT_PAIR_CAP = 10**8


def sigmoid(x):
    """Logistic function, overflow-free for any finite input."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


def log_sigmoid(x):
    """``log(sigmoid(x))`` as ``min(x, 0) - log1p(exp(-|x|))``."""
    x = np.asarray(x, dtype=np.float64)
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return out if out.ndim else float(out)


@total_ordering
class _NegativeInfinity:
    """Optimum of a pair that was never co-purchased.

    Orders below every real number and equals only itself.
    """

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __eq__(self, other):
        return other is self

    def __lt__(self, other):
        return other is not self

    def __hash__(self):
        return hash("sparse_cf.NEG_INF")

    def __repr__(self):
        return "NEG_INF"

    def __float__(self):
        return float("-inf")

    def __reduce__(self):
        return (_NegativeInfinity, ())


NEG_INF = _NegativeInfinity()


def _check_counts(n_d_s, n_d_r):
    if n_d_s < 1 or n_d_r < 1:
        raise DomainError(f"purchase counts must be >= 1, got ({n_d_s}, {n_d_r})")


def pair_loss(h, n_cp, n_d_s, n_d_r):
    """``n_cp * log s(h) + sqrt(n_d_s) sqrt(n_d_r) * log s(-h)``; concave in ``h``."""
    return n_cp * log_sigmoid(h) + np.sqrt(n_d_s) * np.sqrt(n_d_r) * log_sigmoid(-np.asarray(h, dtype=np.float64))


def optimal_h(n_cp, n_d_s, n_d_r):
    """Maximiser of :func:`pair_loss`: the log of the Ochiai coefficient."""
    _check_counts(n_d_s, n_d_r)
    if n_cp < 0:
        raise DomainError("co-purchase count must be nonnegative")
    if n_cp == 0:
        return NEG_INF
    return math.log(n_cp / math.sqrt(n_d_s * n_d_r))


def mc_shift(k_cp, k_s, k_r, z, total_pairs):
    """Constant added to the log-cosine optimum by Monte Carlo sampling."""
    if min(k_cp, k_s, k_r) <= 0 or z <= 0 or total_pairs <= 0:
        raise DomainError("sample counts, z and |CP| must be positive")
    return math.log(k_cp / (k_s * k_r)) + math.log(z * z / total_pairs)


def mc_optimal_h(n_cp, n_d_s, n_d_r, k_cp, k_s, k_r, z, total_pairs):
    """Optimum of the per-pair Monte Carlo cost: :func:`optimal_h` plus :func:`mc_shift`."""
    base = optimal_h(n_cp, n_d_s, n_d_r)
    shift = mc_shift(k_cp, k_s, k_r, z, total_pairs)
    if base is NEG_INF:
        return NEG_INF
    return base + shift


def loss_gradient_wrt_h(positive, h, weight=1.0):
    """d/dh of one weighted term: ``w s(-h)`` for positives, ``-w s(h)`` for negatives."""
    h = np.asarray(h, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    out = np.where(positive, weight * sigmoid(-h), -weight * sigmoid(h))
    return out if out.ndim else float(out)


def _all_pairs(n):
    s, r = np.meshgrid(np.arange(n, dtype=np.int64), np.arange(n, dtype=np.int64), indexing="ij")
    return s.reshape(-1), r.reshape(-1)


def full_loss(h_fn, stats, items=None, max_pairs=DEFAULT_PAIR_CAP, chunk=1 << 20):
    """Exhaustive objective over the co-purchases and the full ``I x I`` grid.

    ``h_fn(seed_positions, candidate_positions) -> scores`` is evaluated on
    every ordered pair of the item universe ``items`` (positions; defaults to
    all items in ``stats``).  Refuses grids with more than ``max_pairs``
    entries.
    """
    universe = np.arange(stats.n_items, dtype=np.int64) if items is None else np.asarray(items, dtype=np.int64)
    n = universe.shape[0]
    if n * n > max_pairs:
        raise DomainError(f"{n}x{n} pair grid exceeds the cap of {max_pairs} evaluations")
    total = 0.0
    if stats.n_stored_pairs:
        h_pos = np.asarray(h_fn(stats.pair_seeds, stats.pair_cands), dtype=np.float64)
        total += float(np.dot(stats.pair_counts, log_sigmoid(h_pos)))
    sq = np.sqrt(stats.item_counts.astype(np.float64))
    si, ri = _all_pairs(n)
    for start in range(0, si.shape[0], chunk):
        s = universe[si[start:start + chunk]]
        r = universe[ri[start:start + chunk]]
        w = sq[s] * sq[r]
        total += float(np.dot(w, log_sigmoid(-np.asarray(h_fn(s, r), dtype=np.float64))))
    return total


def mc_loss(batch, h_fn):
    """Unit-weight sampled objective over a :class:`~sparse_cf.sampling.TrainingBatch`."""
    if len(batch) == 0:
        raise DomainError("empty batch")
    total = 0.0
    if batch.pos_seeds.shape[0]:
        total += float(np.sum(log_sigmoid(np.asarray(h_fn(batch.pos_seeds, batch.pos_cands), dtype=np.float64))))
    if batch.neg_seeds.shape[0]:
        total += float(np.sum(log_sigmoid(-np.asarray(h_fn(batch.neg_seeds, batch.neg_cands), dtype=np.float64))))
    return total
