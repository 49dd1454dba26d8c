"""Weighted sampling of co-purchase pairs and items, and batch assembly.

Positive pairs are drawn in proportion to ``n_CP(s, r)``; negative seeds and
candidates are drawn independently in proportion to ``sqrt(n_D(t))``.  All
draws are with replacement.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import CooccurrenceStats
from .exceptions import SamplerError

# Fixed offsets from the master seed, one stream per consumer.
PAIR_STREAM = 1
ITEM_STREAM = 2
ORDER_STREAM = 3
SPLIT_STREAM = 4
VALIDATION_STREAM = 5
INIT_STREAM = 6


def derive_seed(master: int, stream: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master) & 0xFFFFFFFFFFFFFFFF, stream])


def make_rng(master: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master, stream)))


class CategoricalSampler:
    """Vose alias table over ``support`` with O(1) draws.

    ``support`` may be any sequence; :meth:`draw_index` returns positions into
    it, :meth:`draw` the outcomes themselves.
    """

    def __init__(self, support, weights, seed=0):
        weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        if weights.shape[0] == 0:
            raise SamplerError("cannot sample from an empty support")
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise SamplerError("weights must be finite and nonnegative")
        total = weights.sum()
        if total <= 0:
            raise SamplerError("weights sum to zero")
        self.support = support
        self.weights = weights
        self.probabilities = weights / total
        self.prob, self.alias = _alias_table(self.probabilities)
        self.seed = seed
        self.rng = np.random.Generator(np.random.PCG64(seed))

    def __len__(self):
        return self.weights.shape[0]

    def draw_index(self, size) -> np.ndarray:
        n = self.prob.shape[0]
        column = self.rng.integers(0, n, size=size)
        coin = self.rng.random(size=size)
        return np.where(coin < self.prob[column], column, self.alias[column])

    def draw(self, size):
        idx = self.draw_index(size)
        if isinstance(self.support, np.ndarray):
            return self.support[idx]
        return [self.support[i] for i in idx]

    def clone(self, seed) -> "CategoricalSampler":
        return CategoricalSampler(self.support, self.weights, seed)


def _alias_table(p: np.ndarray):
    n = p.shape[0]
    scaled = p * n
    prob = np.ones(n, dtype=np.float64)
    alias = np.arange(n, dtype=np.int64)
    small = [i for i in range(n) if scaled[i] < 1.0]
    large = [i for i in range(n) if scaled[i] >= 1.0]
    while small and large:
        lo = small.pop()
        hi = large.pop()
        prob[lo] = scaled[lo]
        alias[lo] = hi
        scaled[hi] = (scaled[hi] + scaled[lo]) - 1.0
        if scaled[hi] < 1.0:
            small.append(hi)
        else:
            large.append(hi)
    # leftovers are 1 up to rounding
    return prob, alias


def build_pair_sampler(stats: CooccurrenceStats, seed) -> CategoricalSampler:
    """Sampler over stored ``(seed, candidate)`` position rows weighted by ``n_CP``."""
    if stats.total_pairs <= 0:
        raise SamplerError("no co-purchases to sample from")
    support = np.stack([stats.pair_seeds, stats.pair_cands], axis=1)
    return CategoricalSampler(support, stats.pair_counts, seed)


def build_item_sampler(stats: CooccurrenceStats, seed) -> CategoricalSampler:
    """Sampler over item positions weighted by ``sqrt(n_D)``."""
    if stats.total_purchases <= 0:
        raise SamplerError("no purchases to sample from")
    support = np.arange(stats.n_items, dtype=np.int64)
    return CategoricalSampler(support, np.sqrt(stats.item_counts.astype(np.float64)), seed)


@dataclass
class TrainingBatch:
    """Positive and negative (seed, candidate) item positions."""

    pos_seeds: np.ndarray
    pos_cands: np.ndarray
    neg_seeds: np.ndarray
    neg_cands: np.ndarray
    k_cp: int = 0
    k_s: int = 0
    k_r: int = 0

    @property
    def positives(self):
        return list(zip(self.pos_seeds.tolist(), self.pos_cands.tolist()))

    @property
    def negatives(self):
        return list(zip(self.neg_seeds.tolist(), self.neg_cands.tolist()))

    @property
    def meta(self):
        return (self.k_cp, self.k_s, self.k_r)

    def __len__(self):
        return int(self.pos_seeds.shape[0] + self.neg_seeds.shape[0])

    def examples(self):
        """Concatenated ``(seeds, candidates, labels)`` with positives first."""
        seeds = np.concatenate([self.pos_seeds, self.neg_seeds])
        cands = np.concatenate([self.pos_cands, self.neg_cands])
        labels = np.concatenate([
            np.ones(self.pos_seeds.shape[0], dtype=np.int8),
            np.zeros(self.neg_seeds.shape[0], dtype=np.int8),
        ])
        return seeds, cands, labels


def _draw_positives(pair_sampler, k_cp):
    rows = pair_sampler.draw(k_cp)
    return rows[:, 0].copy(), rows[:, 1].copy()


def sample_mc_batch(pair_sampler, item_sampler, k_cp, k_s, k_r) -> TrainingBatch:
    """``k_cp`` positives from ``P_CP``; ``k_s`` seeds x ``k_r`` candidates from ``P_D^sqrt``."""
    if min(k_cp, k_s, k_r) < 0:
        raise ValueError("sample counts must be nonnegative")
    pos_s, pos_r = _draw_positives(pair_sampler, k_cp)
    seeds = item_sampler.draw(k_s)
    cands = item_sampler.draw(k_s * k_r)
    return TrainingBatch(pos_s, pos_r, np.repeat(seeds, k_r), cands, k_cp, k_s, k_r)


def sample_per_seed_batch(pair_sampler, item_sampler, k_cp, k_r) -> TrainingBatch:
    """``k_cp`` positives, each followed by ``k_r`` sampled candidates for its seed."""
    if min(k_cp, k_r) < 0:
        raise ValueError("sample counts must be nonnegative")
    pos_s, pos_r = _draw_positives(pair_sampler, k_cp)
    cands = item_sampler.draw(k_cp * k_r)
    return TrainingBatch(pos_s, pos_r, np.repeat(pos_s, k_r), cands, k_cp, k_cp, k_r)
