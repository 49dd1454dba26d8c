"""Ranking evaluation, agreement statistics and embedding-neighbour listings."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .corpus import ItemBatch, ItemCatalog
from .exceptions import DomainError
from .sampling import make_rng

DEFAULT_KS = (1, 10, 30)
TABLE_POSITIONS = (0, 10, 100, 1000, 10000, 20000, 50000, 100000)


# --------------------------------------------------------------------------
# Statistics
# --------------------------------------------------------------------------


def rmse(xs, ys) -> float:
    xs = np.asarray(xs, dtype=np.float64).reshape(-1)
    ys = np.asarray(ys, dtype=np.float64).reshape(-1)
    if xs.shape != ys.shape:
        raise DomainError(f"length mismatch: {xs.shape[0]} vs {ys.shape[0]}")
    if xs.shape[0] == 0:
        raise DomainError("rmse of empty vectors")
    return float(np.sqrt(np.mean((xs - ys) ** 2)))


def spearman(xs, ys) -> float:
    """Pearson correlation of tie-averaged ranks."""
    xs = np.asarray(xs, dtype=np.float64).reshape(-1)
    ys = np.asarray(ys, dtype=np.float64).reshape(-1)
    if xs.shape != ys.shape:
        raise DomainError(f"length mismatch: {xs.shape[0]} vs {ys.shape[0]}")
    if xs.shape[0] < 2:
        raise DomainError("spearman needs at least two observations")
    rx = rankdata(xs) - (xs.shape[0] + 1) / 2.0
    ry = rankdata(ys) - (ys.shape[0] + 1) / 2.0
    denom = np.sqrt(np.dot(rx, rx) * np.dot(ry, ry))
    if denom == 0:
        raise DomainError("spearman undefined for constant input")
    return float(np.clip(np.dot(rx, ry) / denom, -1.0, 1.0))


def recall_at_k(ranks, k) -> float:
    """Fraction of seeds whose true item ranks within the top ``k``."""
    if k < 1:
        raise DomainError("k must be >= 1")
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise DomainError("no ranks")
    return float(np.mean(ranks <= k))


def mrr(ranks) -> float:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise DomainError("mrr of an empty rank list")
    if np.any(ranks < 1):
        raise DomainError("ranks start at 1")
    return float(np.mean(1.0 / ranks))


def random_recall(k, pool_size) -> float:
    """Expected recall@k when the true item's rank is uniform over ``pool_size + 1``."""
    return min(k, pool_size + 1) / (pool_size + 1)


def random_mrr(pool_size) -> float:
    n = pool_size + 1
    return float(np.sum(1.0 / np.arange(1, n + 1)) / n)


# --------------------------------------------------------------------------
# Ranking tasks
# --------------------------------------------------------------------------


@dataclass
class RankingTask:
    """Seeds with one true co-purchase each, scored against one shared pool."""

    seeds: list
    candidate_pool: list
    pool_size: int = field(init=False)

    def __post_init__(self):
        self.pool_size = len(self.candidate_pool)
        pool = set(self.candidate_pool)
        if len(pool) != self.pool_size:
            raise DomainError("candidate pool has duplicates")
        for _, true_item in self.seeds:
            if true_item in pool:
                raise DomainError(f"true item {true_item!r} is also in the pool")

    def candidates(self, k):
        """Candidate list of seed ``k``: the shared pool followed by its true item."""
        return list(self.candidate_pool) + [self.seeds[k][1]]


@dataclass
class RankingReport:
    ranks: list
    pool_size: int
    ks: tuple = DEFAULT_KS

    @property
    def n_seeds(self):
        return len(self.ranks)

    @property
    def recall(self):
        return {int(k): recall_at_k(self.ranks, k) for k in self.ks}

    @property
    def mrr(self):
        return mrr(self.ranks)

    def to_dict(self):
        return {
            "n_seeds": self.n_seeds,
            "pool_size": self.pool_size,
            "recall": {str(k): v for k, v in self.recall.items()},
            "mrr": self.mrr,
            "ranks": [int(r) for r in self.ranks],
        }

    def write_json(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def build_ranking_task(train_items, eval_pairs, pool_size, seed, n_seeds=None, universe=None) -> RankingTask:
    """Sample seeds from ``eval_pairs`` and one pool of items outside training.

    ``universe`` lists the items eligible for the pool (defaults to the items
    of ``eval_pairs``).  Seeds and true items are kept out of the pool.
    """
    train = set(train_items)
    pairs = [(s, r) for s, r in eval_pairs if s != r]
    for s, r in pairs:
        if s in train or r in train:
            raise DomainError(f"evaluation pair ({s!r}, {r!r}) touches a training item")
    if not pairs:
        raise DomainError("no evaluation pairs")
    rng = make_rng(seed, 11)
    pairs = sorted(set(pairs), key=repr)
    if n_seeds is not None and n_seeds < len(pairs):
        pick = np.sort(rng.choice(len(pairs), size=n_seeds, replace=False))
        pairs = [pairs[k] for k in pick]
    used = {s for s, _ in pairs} | {r for _, r in pairs}
    if universe is None:
        universe = {t for p in eval_pairs for t in p}
    eligible = sorted((t for t in set(universe) if t not in train and t not in used), key=repr)
    if len(eligible) < pool_size:
        raise DomainError(f"only {len(eligible)} disjoint items available for a pool of {pool_size}")
    pick = np.sort(rng.choice(len(eligible), size=pool_size, replace=False)) if pool_size else []
    return RankingTask(pairs, [eligible[k] for k in pick])


def _id_order(items):
    """Position of every item in ascending-id order."""
    order = sorted(range(len(items)), key=lambda k: items[k])
    pos = np.empty(len(items), dtype=np.int64)
    pos[order] = np.arange(len(items))
    return pos


def rank_candidates(scores, candidates):
    """Candidates ordered by descending score, ties by ascending id.

    Returns ``(ordered_candidates, ranks)`` where ``ranks[k]`` is the 1-based
    rank of ``candidates[k]``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((_id_order(candidates), -scores))
    ranks = np.empty(len(candidates), dtype=np.int64)
    ranks[order] = np.arange(1, len(candidates) + 1)
    return [candidates[k] for k in order], ranks


def evaluate_ranking(score_fn, task: RankingTask, ks=DEFAULT_KS) -> RankingReport:
    """``score_fn(seed_item, candidate_items) -> scores`` applied to every seed."""
    ranks = []
    for k, (seed_item, _) in enumerate(task.seeds):
        cands = task.candidates(k)
        _, r = rank_candidates(score_fn(seed_item, cands), cands)
        ranks.append(int(r[-1]))
    return RankingReport(ranks, task.pool_size, tuple(ks))


def model_score_fn(model, catalog: ItemCatalog):
    """Score function for a trained model, featurising items through ``catalog``."""
    cache = {}

    def batch_of(items):
        key = tuple(items)
        if key not in cache:
            cache.clear()
            cache[key] = ItemBatch.from_features([catalog[t] for t in items])
        return cache[key]

    def score(seed_item, cands):
        seed_batch = ItemBatch.from_features([catalog[seed_item]] * len(cands))
        return model.score_batches(seed_batch, batch_of(cands))

    return score


def random_score_fn(seed):
    rng = make_rng(seed, 12)
    return lambda seed_item, cands: rng.random(len(cands))


# --------------------------------------------------------------------------
# Neighbours
# --------------------------------------------------------------------------


def nearest_neighbors(model, anchor, catalog: ItemCatalog, positions=TABLE_POSITIONS, items=None, side="seed"):
    """Items at the requested positions of the distance-sorted embedding list.

    Distances are Euclidean between item-embedder outputs; ties keep item-id
    order.  Returns ``[(position, item_id, distance), ...]``.
    """
    items = sorted(catalog.items if items is None else items, key=repr)
    if anchor not in catalog:
        raise DomainError(f"unknown item {anchor!r}")
    if anchor not in items:
        items = sorted(items + [anchor], key=repr)
    positions = list(positions)
    if any(p < 0 or p >= len(items) for p in positions):
        raise DomainError(f"position beyond catalog of {len(items)} items")
    vecs = model.embed(ItemBatch.from_features([catalog[t] for t in items]), side)
    anchor_vec = model.embed(ItemBatch.from_features([catalog[anchor]]), side)[0]
    dist = np.sqrt(np.sum((vecs - anchor_vec) ** 2, axis=1))
    is_anchor = np.array([t == anchor for t in items])
    dist[is_anchor] = 0.0
    # anchor first among zero distances, then ascending distance and id
    order = np.lexsort((np.arange(len(items)), ~is_anchor, dist))
    return [(p, items[order[p]], float(dist[order[p]])) for p in positions]


def clip_positions(positions, n_items):
    return [p for p in positions if p < n_items]


def write_neighbors_tsv(path, rows, titles):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("position\titem_id\ttitle\tdistance\n")
        for pos, item, dist in rows:
            fh.write(f"{pos}\t{item}\t{titles.get(item, '')}\t{dist:.6f}\n")
