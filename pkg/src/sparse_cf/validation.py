"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

import numbers

import numpy as np

from .corpus import CooccurrenceStats, TransactionLog, compute_stats, ingest_transactions
from .exceptions import ConfigError, DomainError


def check_positive_int(value, name, allow_zero=False):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    if value < 0 or (value == 0 and not allow_zero):
        raise ConfigError(f"{name} must be {'>= 0' if allow_zero else '> 0'}, got {value}")
    return int(value)


def check_fraction(value, name, closed_right=False):
    value = float(value)
    ok = 0 <= value <= 1 if closed_right else 0 <= value < 1
    if not ok:
        raise ConfigError(f"{name} must lie in [0, 1{']' if closed_right else ')'}, got {value}")
    return value


def check_choice(value, name, choices):
    if value not in choices:
        raise ConfigError(f"{name} must be one of {tuple(choices)}, got {value!r}")
    return value


def check_stats(X) -> CooccurrenceStats:
    """Accept statistics, a transaction log, or ``(user, item, timestamp)`` records."""
    if isinstance(X, CooccurrenceStats):
        return X
    if isinstance(X, TransactionLog):
        return compute_stats(X)
    return compute_stats(ingest_transactions(X))


def check_pairs(X):
    """Item-id pairs as a list of 2-tuples."""
    if isinstance(X, np.ndarray):
        if X.ndim != 2 or X.shape[1] != 2:
            raise DomainError(f"expected an (n, 2) array of pairs, got shape {X.shape}")
        return [tuple(row) for row in X.tolist()]
    pairs = []
    for row in X:
        row = tuple(row)
        if len(row) != 2:
            raise DomainError(f"expected (seed, candidate) pairs, got {row!r}")
        pairs.append(row)
    return pairs


def check_known_items(items, known, what="item"):
    missing = [t for t in items if t not in known]
    if missing:
        raise DomainError(f"unknown {what} {missing[0]!r}" + (f" (+{len(missing) - 1} more)" if len(missing) > 1 else ""))
