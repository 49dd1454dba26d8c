"""Transaction logs, co-occurrence statistics and item catalogs.

Everything downstream consumes a :class:`CooccurrenceStats`: purchase counts
per item, ordered co-purchase counts per item pair, and the square-root
normaliser ``z``.  Items are addressed by their external id in the public
accessors and by a dense position (``0 .. n_items - 1``) in the array-valued
ones; :meth:`CooccurrenceStats.index` converts between the two.
"""
from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .exceptions import DomainError, IngestionError, SchemaError

UNK_TOKEN = "<unk>"
UNK_ID = 0


# --------------------------------------------------------------------------
# Transactions
# --------------------------------------------------------------------------


@dataclass
class TransactionLog:
    """Purchases ``D`` and ordered co-purchase pairs ``CP`` with provenance."""

    copurchases: list = field(default_factory=list)
    purchases: list = field(default_factory=list)
    copurchase_users: list = field(default_factory=list)
    purchase_users: list = field(default_factory=list)

    def __len__(self):
        return len(self.purchases)


def parse_timestamp(value) -> float:
    """Integer/float epoch seconds or an ISO-8601 string, as float seconds."""
    if isinstance(value, (int, float, np.integer, np.floating)) and not isinstance(value, bool):
        return float(value)
    text = str(value).strip()
    try:
        return float(int(text))
    except ValueError:
        pass
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    stamp = datetime.fromisoformat(text)
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=timezone.utc)
    return stamp.timestamp()


def ingest_transactions(records: Iterable) -> TransactionLog:
    """Build a :class:`TransactionLog` from ``(user, item, timestamp)`` records.

    Purchases are deduplicated per (user, item), keeping the earliest event.
    Each user's distinct items are ordered by timestamp (ties keep input
    order) and every pair ``(earlier, later)`` becomes one co-purchase.
    """
    per_user: "OrderedDict[Hashable, list]" = OrderedDict()
    for lineno, record in enumerate(records, start=1):
        try:
            user, item, stamp = record
        except (TypeError, ValueError):
            raise IngestionError(f"expected (user, item, timestamp), got {record!r}", lineno) from None
        try:
            t = parse_timestamp(stamp)
        except (TypeError, ValueError) as exc:
            raise IngestionError(f"bad timestamp {stamp!r}: {exc}", lineno) from None
        if not math.isfinite(t):
            raise IngestionError(f"non-finite timestamp {stamp!r}", lineno)
        per_user.setdefault(user, []).append((t, lineno, item))

    log = TransactionLog()
    for user, events in per_user.items():
        # stable sort: equal timestamps keep input order
        events.sort(key=lambda e: (e[0], e[1]))
        seen = set()
        ordered = []
        for _, _, item in events:
            if item not in seen:
                seen.add(item)
                ordered.append(item)
        for k, item in enumerate(ordered):
            log.purchases.append(item)
            log.purchase_users.append(user)
            for later in ordered[k + 1:]:
                log.copurchases.append((item, later))
                log.copurchase_users.append(user)
    return log


def read_transactions(path) -> TransactionLog:
    """Parse a tab-separated ``user_id<TAB>item_id<TAB>timestamp`` file."""
    return ingest_transactions(read_transaction_records(path))


def read_transaction_records(path) -> list:
    """Raw ``(user, item, timestamp)`` rows of a transactions file, validated."""

    def rows():
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n\r")
                if not line.strip():
                    # keep numbering aligned with the file
                    yield None, lineno
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise IngestionError(f"expected 3 tab-separated fields, got {len(parts)}", lineno)
                yield tuple(parts), lineno

    records = []
    for row, lineno in rows():
        if row is None:
            continue
        try:
            parse_timestamp(row[2])
        except ValueError as exc:
            raise IngestionError(f"bad timestamp {row[2]!r}: {exc}", lineno) from None
        records.append(row)
    return records


def write_transactions(path, records: Iterable) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for user, item, stamp in records:
            fh.write(f"{user}\t{item}\t{stamp}\n")


# --------------------------------------------------------------------------
# Co-occurrence statistics
# --------------------------------------------------------------------------


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class CooccurrenceStats:
    """Sufficient statistics ``n_CP``, ``n_D``, ``|CP|``, ``|D|`` and ``Z``.

    Pair counts are stored sparsely as parallel arrays sorted by
    ``seed * n_items + candidate``; absent pairs read as zero.
    Instances are immutable.
    """

    def __init__(self, items, item_counts, pair_seeds, pair_cands, pair_counts):
        self.items = tuple(items)
        self._index = {item: k for k, item in enumerate(self.items)}
        if len(self._index) != len(self.items):
            raise ValueError("duplicate item ids")
        n = len(self.items)
        item_counts = np.asarray(item_counts, dtype=np.int64).reshape(-1)
        if item_counts.shape[0] != n:
            raise ValueError("item_counts length does not match items")
        if np.any(item_counts < 0):
            raise ValueError("negative purchase count")
        seeds = np.asarray(pair_seeds, dtype=np.int64).reshape(-1)
        cands = np.asarray(pair_cands, dtype=np.int64).reshape(-1)
        counts = np.asarray(pair_counts, dtype=np.int64).reshape(-1)
        if not (seeds.shape == cands.shape == counts.shape):
            raise ValueError("pair arrays must have equal length")
        if seeds.size and (seeds.min() < 0 or cands.min() < 0 or seeds.max() >= n or cands.max() >= n):
            raise ValueError("pair index out of range")
        keys = seeds * n + cands
        keys, inverse = np.unique(keys, return_inverse=True)
        summed = np.zeros(keys.shape[0], dtype=np.int64)
        np.add.at(summed, inverse, counts)
        keep = summed > 0
        keys, summed = keys[keep], summed[keep]

        self.n_items = n
        self.item_counts = _readonly(item_counts)
        self._keys = _readonly(keys)
        self.pair_seeds = _readonly(keys // n if n else keys)
        self.pair_cands = _readonly(keys % n if n else keys)
        self.pair_counts = _readonly(summed)
        self.total_pairs = int(summed.sum())
        self.total_purchases = int(item_counts.sum())
        self.z = float(np.sqrt(item_counts.astype(np.float64)).sum())

    # -- lookups -------------------------------------------------------
    def index(self, item) -> int:
        try:
            return self._index[item]
        except KeyError:
            raise DomainError(f"unknown item {item!r}") from None

    def __contains__(self, item):
        return item in self._index

    def n_d(self, item) -> int:
        return int(self.item_counts[self.index(item)])

    def n_cp(self, seed, candidate) -> int:
        return int(self.pair_count_at(self.index(seed), self.index(candidate)))

    def pair_count_at(self, seed_pos, cand_pos):
        """Vectorised ``n_CP`` lookup by item position (zeros for absent pairs)."""
        s = np.asarray(seed_pos, dtype=np.int64)
        r = np.asarray(cand_pos, dtype=np.int64)
        keys = s * self.n_items + r
        loc = np.searchsorted(self._keys, keys)
        loc = np.minimum(loc, max(self._keys.shape[0] - 1, 0))
        if self._keys.shape[0] == 0:
            out = np.zeros(keys.shape, dtype=np.int64)
        else:
            out = np.where(self._keys[loc] == keys, self.pair_counts[loc], 0)
        return out if out.ndim else int(out)

    @property
    def pair_count_map(self) -> dict:
        """``{(seed_id, candidate_id): n_CP}`` for every stored pair."""
        return {
            (self.items[s], self.items[r]): int(c)
            for s, r, c in zip(self.pair_seeds, self.pair_cands, self.pair_counts)
        }

    @property
    def item_count_map(self) -> dict:
        return {item: int(c) for item, c in zip(self.items, self.item_counts)}

    @property
    def n_stored_pairs(self) -> int:
        return int(self.pair_counts.shape[0])

    def dense_pair_counts(self) -> np.ndarray:
        """``n_items x n_items`` count matrix; desk scale only."""
        out = np.zeros((self.n_items, self.n_items), dtype=np.int64)
        out[self.pair_seeds, self.pair_cands] = self.pair_counts
        return out

    def pair_cosines(self) -> np.ndarray:
        """Ochiai coefficient of every stored pair, aligned with ``pair_counts``."""
        n_d = self.item_counts.astype(np.float64)
        return self.pair_counts / np.sqrt(n_d[self.pair_seeds] * n_d[self.pair_cands])

    def restrict_pairs(self, keep_mask) -> "CooccurrenceStats":
        """Copy keeping only the stored pairs selected by ``keep_mask``."""
        keep_mask = np.asarray(keep_mask, dtype=bool)
        return CooccurrenceStats(
            self.items,
            self.item_counts,
            self.pair_seeds[keep_mask],
            self.pair_cands[keep_mask],
            self.pair_counts[keep_mask],
        )

    def __repr__(self):
        return (
            f"CooccurrenceStats(n_items={self.n_items}, total_pairs={self.total_pairs}, "
            f"total_purchases={self.total_purchases}, z={self.z:.6g})"
        )


def compute_stats(log: TransactionLog) -> CooccurrenceStats:
    """Aggregate a log into counts; items are ordered by first purchase."""
    index: dict = {}
    for item in log.purchases:
        if item not in index:
            index[item] = len(index)
    items = list(index)
    item_counts = np.bincount(
        np.fromiter((index[t] for t in log.purchases), dtype=np.int64, count=len(log.purchases)),
        minlength=len(items),
    ).astype(np.int64)
    seeds = np.empty(len(log.copurchases), dtype=np.int64)
    cands = np.empty(len(log.copurchases), dtype=np.int64)
    for k, (s, r) in enumerate(log.copurchases):
        try:
            seeds[k] = index[s]
            cands[k] = index[r]
        except KeyError as exc:
            raise DomainError(f"co-purchased item {exc.args[0]!r} has no purchase event") from None
    return CooccurrenceStats(items, item_counts, seeds, cands, np.ones_like(seeds))


def cosine_oracle(stats: CooccurrenceStats, s, r) -> float:
    """``n_CP(s, r) / (sqrt(n_D(s)) * sqrt(n_D(r)))`` for item ids ``s``, ``r``.

    For self pairs the co-purchase count is ``n_D(s)`` (identical bit vectors),
    which gives exactly 1.
    """
    n_s = stats.n_d(s)
    n_r = stats.n_d(r)
    if n_s <= 0 or n_r <= 0:
        raise DomainError(f"zero purchase count for pair ({s!r}, {r!r})")
    n_cp = n_s if s == r else stats.n_cp(s, r)
    # sqrt of the exact integer product keeps identical vectors at exactly 1
    return min(n_cp / math.sqrt(n_s * n_r), 1.0)


# --------------------------------------------------------------------------
# Item catalog
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureSetSpec:
    name: str
    sequential: bool = False


@dataclass(frozen=True)
class ItemFeatures:
    """Token ids for each feature set, in schema order."""

    sets: tuple

    def __post_init__(self):
        object.__setattr__(self, "sets", tuple(np.asarray(s, dtype=np.int64) for s in self.sets))

    def __len__(self):
        return len(self.sets)

    def __eq__(self, other):
        return (
            isinstance(other, ItemFeatures)
            and len(self.sets) == len(other.sets)
            and all(np.array_equal(a, b) for a, b in zip(self.sets, other.sets))
        )

    def __hash__(self):
        return hash(tuple(tuple(s.tolist()) for s in self.sets))


class ItemCatalog:
    """Item id -> :class:`ItemFeatures`, plus one vocabulary per feature set.

    Every vocabulary reserves id 0 for :data:`UNK_TOKEN`.  While the catalog
    is open, new tokens get the next dense id; once frozen, unseen tokens
    map to the unknown id.
    """

    def __init__(self, schema: Sequence[FeatureSetSpec]):
        if not schema:
            raise SchemaError("catalog schema must declare at least one feature set")
        names = [spec.name for spec in schema]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate feature-set names in schema")
        self.schema = tuple(schema)
        self.vocabularies = {spec.name: {UNK_TOKEN: UNK_ID} for spec in self.schema}
        self.items: "OrderedDict[Hashable, ItemFeatures]" = OrderedDict()
        self.frozen = False

    @property
    def set_names(self):
        return [spec.name for spec in self.schema]

    @property
    def vocab_sizes(self):
        return [len(self.vocabularies[spec.name]) for spec in self.schema]

    def freeze(self):
        self.frozen = True
        return self

    def lookup(self, set_name, token) -> int:
        vocab = self.vocabularies[set_name]
        tid = vocab.get(token)
        if tid is None:
            if self.frozen:
                return UNK_ID
            tid = len(vocab)
            vocab[token] = tid
        return tid

    def encode(self, features: Mapping[str, Sequence[str]]) -> ItemFeatures:
        unknown = set(features) - set(self.set_names)
        if unknown:
            raise SchemaError(f"feature sets {sorted(unknown)} are not in the catalog schema")
        return ItemFeatures(
            tuple(
                [self.lookup(spec.name, tok) for tok in features.get(spec.name, ())]
                for spec in self.schema
            )
        )

    def add(self, item_id, features: Mapping[str, Sequence[str]]) -> ItemFeatures:
        encoded = self.encode(features)
        self.items[item_id] = encoded
        return encoded

    def __getitem__(self, item_id) -> ItemFeatures:
        try:
            return self.items[item_id]
        except KeyError:
            raise DomainError(f"unknown item {item_id!r}") from None

    def __contains__(self, item_id):
        return item_id in self.items

    def __len__(self):
        return len(self.items)

    def feature_matrix(self, item_ids=None) -> "FeatureMatrix":
        item_ids = list(self.items) if item_ids is None else list(item_ids)
        return FeatureMatrix.from_features([self[i] for i in item_ids], self.schema, self.vocab_sizes)


def build_catalog(items: Iterable, schema: Sequence[FeatureSetSpec] | None = None) -> ItemCatalog:
    """Tokenise ``(item_id, {set_name: [token, ...]})`` records and freeze.

    Without an explicit schema, feature-set names are taken from the first
    item and treated as bags.
    """
    items = list(items)
    if schema is None:
        if not items:
            raise SchemaError("cannot infer a schema from an empty item stream")
        schema = [FeatureSetSpec(name) for name in items[0][1]]
    catalog = ItemCatalog(schema)
    for item_id, features in items:
        catalog.add(item_id, features)
    return catalog.freeze()


class FeatureMatrix:
    """Row-aligned CSR token storage for a list of items, one block per feature set."""

    def __init__(self, schema, vocab_sizes, indptrs, indices):
        self.schema = tuple(schema)
        self.vocab_sizes = list(vocab_sizes)
        self.indptrs = [np.asarray(p, dtype=np.int64) for p in indptrs]
        self.indices = [np.asarray(i, dtype=np.int64) for i in indices]
        self.n_rows = self.indptrs[0].shape[0] - 1 if self.indptrs else 0

    @classmethod
    def from_features(cls, features: Sequence[ItemFeatures], schema, vocab_sizes):
        indptrs, indices = [], []
        for k in range(len(schema)):
            lengths = np.fromiter((f.sets[k].shape[0] for f in features), dtype=np.int64, count=len(features))
            indptrs.append(np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64))
            parts = [f.sets[k] for f in features]
            indices.append(np.concatenate(parts).astype(np.int64) if parts else np.zeros(0, np.int64))
        return cls(schema, vocab_sizes, indptrs, indices)

    def take(self, rows) -> "ItemBatch":
        rows = np.asarray(rows, dtype=np.int64).reshape(-1)
        sets = []
        for indptr, indices in zip(self.indptrs, self.indices):
            starts = indptr[rows]
            lengths = indptr[rows + 1] - starts
            total = int(lengths.sum())
            if total:
                offsets = np.repeat(starts - np.concatenate([[0], np.cumsum(lengths)[:-1]]), lengths)
                flat = indices[np.arange(total) + offsets]
            else:
                flat = np.zeros(0, dtype=np.int64)
            sets.append((lengths, flat))
        return ItemBatch(tuple(sets))


@dataclass(frozen=True)
class ItemBatch:
    """Per feature set: ``(lengths[B], flat_tokens[sum(lengths)])``."""

    sets: tuple

    @property
    def size(self):
        return int(self.sets[0][0].shape[0])

    @classmethod
    def from_features(cls, features: Sequence[ItemFeatures]):
        sets = []
        for k in range(len(features[0].sets)):
            lengths = np.array([f.sets[k].shape[0] for f in features], dtype=np.int64)
            flat = np.concatenate([f.sets[k] for f in features]).astype(np.int64)
            sets.append((lengths, flat))
        return cls(tuple(sets))


# --------------------------------------------------------------------------
# Catalog files
# --------------------------------------------------------------------------


def read_schema(path) -> list:
    specs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2 or parts[1] not in ("sequential", "bag"):
                raise IngestionError("expected 'set_name<TAB>sequential|bag'", lineno)
            specs.append(FeatureSetSpec(parts[0], parts[1] == "sequential"))
    return specs


def write_schema(path, schema) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for spec in schema:
            fh.write(f"{spec.name}\t{'sequential' if spec.sequential else 'bag'}\n")


def read_catalog_records(path) -> list:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                item_id = obj["item_id"]
                features = obj["features"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise IngestionError(f"malformed catalog record: {exc}", lineno) from None
            if not isinstance(features, dict) or not all(isinstance(v, list) for v in features.values()):
                raise IngestionError("features must map set names to token lists", lineno)
            records.append((item_id, features))
    return records


def write_catalog_records(path, records: Iterable) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for item_id, features in records:
            fh.write(json.dumps({"item_id": item_id, "features": features}, sort_keys=True) + "\n")


def load_catalog(catalog_path, schema_path=None, item_ids=None) -> ItemCatalog:
    """Read catalog files; vocabularies are built from ``item_ids`` only (all items if None)."""
    records = read_catalog_records(catalog_path)
    schema = read_schema(schema_path) if schema_path is not None else None
    if item_ids is None:
        return build_catalog(records, schema)
    wanted = set(item_ids)
    catalog = build_catalog([r for r in records if r[0] in wanted], schema)
    for item_id, features in records:
        if item_id not in wanted:
            catalog.add(item_id, features)
    return catalog


def ensure_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path
