"""Content-based similarity networks with explicit forward/backward passes.

A :class:`DcfModel` scores an ordered pair of items::

    item embedder (per side):  per feature set, pool token embeddings
                               (mean, or the last state of a tanh RNN for a
                               sequential set) -> concat -> tanh -> dense -> tanh
    head:                      concat(seed, candidate) -> dense -> tanh -> linear scalar

The scalar is left unsquashed so it can represent a log-cosine.  All
computations are batched over pairs; per-example SGD is batch size one.
"""
from __future__ import annotations

import io
import json
import zipfile
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import FeatureSetSpec, ItemBatch, ItemFeatures
from .exceptions import ConfigError, ModelFormatError

FORMAT_NAME = "sparse_cf.model"
FORMAT_VERSION = 1


# --------------------------------------------------------------------------
# Gradient containers
# --------------------------------------------------------------------------


class SparseRows:
    """Gradient touching only some rows of a table (rows may repeat)."""

    __slots__ = ("rows", "values")

    def __init__(self, rows, values):
        self.rows = np.asarray(rows, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.float64)

    def to_dense(self, shape):
        out = np.zeros(shape, dtype=np.float64)
        np.add.at(out, self.rows, self.values)
        return out

    def scaled(self, factor):
        return SparseRows(self.rows, self.values * factor)


def _accumulate(grads, name, value):
    prev = grads.get(name)
    if prev is None:
        grads[name] = value
    elif isinstance(prev, SparseRows):
        grads[name] = SparseRows(
            np.concatenate([prev.rows, value.rows]), np.concatenate([prev.values, value.values])
        )
    else:
        grads[name] = prev + value


def apply_gradients(params, grads, lr):
    """In-place ``p -= lr * g`` for dense and row-sparse gradients."""
    for name, g in grads.items():
        p = params[name]
        if isinstance(g, SparseRows):
            if g.rows.size:
                np.add.at(p, g.rows, -lr * g.values)
        else:
            p -= lr * g


def dense_gradients(params, grads):
    return {
        name: (g.to_dense(params[name].shape) if isinstance(g, SparseRows) else np.asarray(g))
        for name, g in grads.items()
    }


# --------------------------------------------------------------------------
# Activations
# --------------------------------------------------------------------------


def _act(name, x):
    if name == "tanh":
        return np.tanh(x)
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "identity":
        return x
    raise ConfigError(f"unknown activation {name!r}")


def _act_grad_from_output(name, y):
    if name == "tanh":
        return 1.0 - y * y
    if name == "relu":
        return (y > 0).astype(np.float64)
    return np.ones_like(y)


# --------------------------------------------------------------------------
# Layers
# --------------------------------------------------------------------------


class EmbeddingTable:
    """``vocab_size x d_emb`` lookup table; row 0 is the unknown token."""

    def __init__(self, vectors):
        self.vectors = vectors

    @property
    def d_emb(self):
        return self.vectors.shape[1]

    def lookup(self, flat):
        flat = np.asarray(flat, dtype=np.int64)
        if flat.size and (flat.min() < 0 or flat.max() >= self.vectors.shape[0]):
            raise IndexError(f"token id out of range for a table of {self.vectors.shape[0]} rows")
        return self.vectors[flat]

    def mean_pool(self, lengths, flat):
        b = lengths.shape[0]
        vecs = self.lookup(flat)
        seg = np.repeat(np.arange(b), lengths)
        pooled = np.zeros((b, self.d_emb))
        np.add.at(pooled, seg, vecs)
        denom = np.maximum(lengths, 1).astype(np.float64)
        pooled /= denom[:, None]
        return pooled, (lengths, flat, seg, denom)

    def mean_pool_backward(self, cache, d_pooled):
        lengths, flat, seg, denom = cache
        return SparseRows(flat, (d_pooled / denom[:, None])[seg])


class DenseLayer:
    """``activation(x @ weights + bias)``."""

    def __init__(self, weights, bias, activation="tanh"):
        self.weights = weights
        self.bias = bias
        self.activation = activation

    def forward(self, x):
        y = _act(self.activation, x @ self.weights + self.bias)
        return y, (x, y)

    def backward(self, cache, dy):
        x, y = cache
        dz = dy * _act_grad_from_output(self.activation, y)
        return dz @ self.weights.T, x.T @ dz, dz.sum(axis=0)


class RnnEncoder:
    """Vanilla tanh recurrence from a zero state; returns the last valid state."""

    def __init__(self, input_weights, recurrent_weights, bias):
        self.input_weights = input_weights
        self.recurrent_weights = recurrent_weights
        self.bias = bias

    @property
    def d_hidden(self):
        return self.recurrent_weights.shape[0]

    def forward(self, lengths, x_flat):
        b = lengths.shape[0]
        d_h = self.d_hidden
        steps = int(lengths.max()) if b else 0
        seg = np.repeat(np.arange(b), lengths)
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]]) if b else np.zeros(0, np.int64)
        pos = np.arange(x_flat.shape[0]) - np.repeat(starts, lengths)
        x_pad = np.zeros((b, steps, x_flat.shape[1] if x_flat.ndim == 2 else self.input_weights.shape[0]))
        x_pad[seg, pos] = x_flat
        states = np.zeros((b, steps + 1, d_h))
        fresh = np.zeros((b, steps, d_h))
        for t in range(steps):
            live = (lengths > t)[:, None]
            fresh[:, t] = np.tanh(x_pad[:, t] @ self.input_weights + states[:, t] @ self.recurrent_weights + self.bias)
            states[:, t + 1] = np.where(live, fresh[:, t], states[:, t])
        return states[:, steps], (lengths, seg, pos, x_pad, states, fresh)

    def backward(self, cache, d_out):
        lengths, seg, pos, x_pad, states, fresh = cache
        steps = x_pad.shape[1]
        d_in = np.zeros_like(self.input_weights)
        d_rec = np.zeros_like(self.recurrent_weights)
        d_b = np.zeros_like(self.bias)
        d_x_pad = np.zeros_like(x_pad)
        d_h = d_out.copy()
        for t in range(steps - 1, -1, -1):
            live = (lengths > t)[:, None].astype(np.float64)
            d_pre = live * d_h * (1.0 - fresh[:, t] ** 2)
            d_in += x_pad[:, t].T @ d_pre
            d_rec += states[:, t].T @ d_pre
            d_b += d_pre.sum(axis=0)
            d_x_pad[:, t] = d_pre @ self.input_weights.T
            d_h = d_pre @ self.recurrent_weights.T + (1.0 - live) * d_h
        return d_x_pad[seg, pos], d_in, d_rec, d_b


# --------------------------------------------------------------------------
# Model configuration
# --------------------------------------------------------------------------

ARCHS = ("dcf-mean", "dcf-rnn")


@dataclass
class DcfConfig:
    set_names: tuple
    vocab_sizes: tuple
    sequential: tuple = ()
    arch: str = "dcf-mean"
    d_emb: int = 200
    d_hidden: int = 400
    d_head: int = 1200
    d_rnn: int = 200
    tied: bool = False
    tie_head: bool = False
    activation: str = "tanh"
    emb_init: float = 0.5

    def __post_init__(self):
        self.set_names = tuple(self.set_names)
        self.vocab_sizes = tuple(int(v) for v in self.vocab_sizes)
        self.sequential = tuple(bool(s) for s in self.sequential) or (False,) * len(self.set_names)
        if not (len(self.set_names) == len(self.vocab_sizes) == len(self.sequential)) or not self.set_names:
            raise ConfigError("set_names, vocab_sizes and sequential must be nonempty and aligned")
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        for name in ("d_emb", "d_hidden", "d_head", "d_rnn"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not self.emb_init > 0:
            raise ConfigError("emb_init must be positive")
        if any(v <= 0 for v in self.vocab_sizes):
            raise ConfigError("vocabulary sizes must be positive")
        if self.arch == "dcf-rnn" and not any(self.sequential):
            raise ConfigError("dcf-rnn needs at least one sequential feature set")
        _act(self.activation, np.zeros(1))

    @classmethod
    def from_catalog(cls, catalog, **kwargs):
        return cls(
            set_names=tuple(catalog.set_names),
            vocab_sizes=tuple(catalog.vocab_sizes),
            sequential=tuple(spec.sequential for spec in catalog.schema),
            **kwargs,
        )

    @property
    def schema(self):
        return tuple(FeatureSetSpec(n, s) for n, s in zip(self.set_names, self.sequential))

    def pooling(self):
        return tuple("rnn" if (self.arch == "dcf-rnn" and seq) else "mean" for seq in self.sequential)

    def concat_dim(self):
        return sum(self.d_rnn if p == "rnn" else self.d_emb for p in self.pooling())

    def param_shapes(self):
        """Ordered ``name -> shape`` for every tensor of the model."""
        shapes = OrderedDict()
        sides = ("seed",) if self.tied else ("seed", "cand")
        for side in sides:
            for name, vocab, pool in zip(self.set_names, self.vocab_sizes, self.pooling()):
                shapes[f"{side}.emb.{name}"] = (vocab, self.d_emb)
                if pool == "rnn":
                    shapes[f"{side}.rnn.{name}.w_in"] = (self.d_emb, self.d_rnn)
                    shapes[f"{side}.rnn.{name}.w_rec"] = (self.d_rnn, self.d_rnn)
                    shapes[f"{side}.rnn.{name}.b"] = (self.d_rnn,)
            shapes[f"{side}.dense.w"] = (self.concat_dim(), self.d_hidden)
            shapes[f"{side}.dense.b"] = (self.d_hidden,)
        head_in = self.d_hidden if self.tie_head else 2 * self.d_hidden
        shapes["head.w"] = (head_in, self.d_head)
        shapes["head.b"] = (self.d_head,)
        shapes["out.w"] = (self.d_head,)
        shapes["out.b"] = (1,)
        return shapes


# --------------------------------------------------------------------------
# Item embedder and full model
# --------------------------------------------------------------------------


class ItemEmbedder:
    """Maps an :class:`ItemBatch` to ``[batch, d_hidden]`` item vectors."""

    def __init__(self, config: DcfConfig, params, side):
        self.config = config
        self.side = side
        self.pooling = config.pooling()
        self.tables = [EmbeddingTable(params[f"{side}.emb.{n}"]) for n in config.set_names]
        self.rnns = [
            RnnEncoder(params[f"{side}.rnn.{n}.w_in"], params[f"{side}.rnn.{n}.w_rec"], params[f"{side}.rnn.{n}.b"])
            if pool == "rnn" else None
            for n, pool in zip(config.set_names, self.pooling)
        ]
        self.dense = DenseLayer(params[f"{side}.dense.w"], params[f"{side}.dense.b"], config.activation)

    def forward(self, batch: ItemBatch):
        if len(batch.sets) != len(self.tables):
            raise ConfigError(f"item has {len(batch.sets)} feature sets, model expects {len(self.tables)}")
        pooled, caches = [], []
        for (lengths, flat), table, rnn in zip(batch.sets, self.tables, self.rnns):
            lengths = np.asarray(lengths, dtype=np.int64)
            if rnn is None:
                vec, cache = table.mean_pool(lengths, flat)
            else:
                vec, cache = rnn.forward(lengths, table.lookup(flat))
                cache = (flat, cache)
            pooled.append(vec)
            caches.append(cache)
        concat = np.concatenate(pooled, axis=1)
        act = _act(self.config.activation, concat)
        out, dense_cache = self.dense.forward(act)
        return out, (caches, act, dense_cache, [p.shape[1] for p in pooled])

    def backward(self, cache, d_out, grads):
        caches, act, dense_cache, widths = cache
        d_act, d_w, d_b = self.dense.backward(dense_cache, d_out)
        _accumulate(grads, f"{self.side}.dense.w", d_w)
        _accumulate(grads, f"{self.side}.dense.b", d_b)
        d_concat = d_act * _act_grad_from_output(self.config.activation, act)
        offsets = np.concatenate([[0], np.cumsum(widths)])
        for k, (name, table, rnn) in enumerate(zip(self.config.set_names, self.tables, self.rnns)):
            d_pooled = d_concat[:, offsets[k]:offsets[k + 1]]
            if rnn is None:
                _accumulate(grads, f"{self.side}.emb.{name}", table.mean_pool_backward(caches[k], d_pooled))
            else:
                flat, rnn_cache = caches[k]
                d_x, d_in, d_rec, d_b = rnn.backward(rnn_cache, d_pooled)
                _accumulate(grads, f"{self.side}.rnn.{name}.w_in", d_in)
                _accumulate(grads, f"{self.side}.rnn.{name}.w_rec", d_rec)
                _accumulate(grads, f"{self.side}.rnn.{name}.b", d_b)
                _accumulate(grads, f"{self.side}.emb.{name}", SparseRows(flat, d_x))

    def embed(self, features: ItemFeatures) -> np.ndarray:
        return self.forward(ItemBatch.from_features([features]))[0][0]


class DcfModel:
    """Two item embedders and a prediction head over ``OrderedDict`` parameters."""

    kind = "dcf"

    def __init__(self, config: DcfConfig, params=None):
        self.config = config
        shapes = config.param_shapes()
        if params is None:
            params = OrderedDict((n, np.zeros(s)) for n, s in shapes.items())
        self.params = OrderedDict()
        for name, shape in shapes.items():
            if name not in params:
                raise ConfigError(f"missing parameter {name}")
            arr = np.ascontiguousarray(params[name], dtype=np.float64)
            if arr.shape != tuple(shape):
                raise ConfigError(f"parameter {name} has shape {arr.shape}, expected {tuple(shape)}")
            self.params[name] = arr
        self._build()

    def _build(self):
        self.seed_embedder = ItemEmbedder(self.config, self.params, "seed")
        self.cand_embedder = (
            self.seed_embedder if self.config.tied else ItemEmbedder(self.config, self.params, "cand")
        )

    @property
    def tied(self):
        return self.config.tied

    def set_params(self, params):
        for name, value in params.items():
            self.params[name][...] = value

    def copy_params(self):
        return OrderedDict((n, p.copy()) for n, p in self.params.items())

    def embed(self, batch: ItemBatch, side="seed"):
        embedder = self.seed_embedder if side == "seed" else self.cand_embedder
        return embedder.forward(batch)[0]

    def head_forward(self, e_s, e_r):
        w = self.params["head.w"]
        if self.config.tie_head:
            z = e_s @ w + e_r @ w + self.params["head.b"]
        else:
            z = np.concatenate([e_s, e_r], axis=1) @ w + self.params["head.b"]
        a = _act(self.config.activation, z)
        h = a @ self.params["out.w"] + self.params["out.b"][0]
        return h, (e_s, e_r, a)

    def head_backward(self, cache, upstream, grads):
        e_s, e_r, a = cache
        _accumulate(grads, "out.w", a.T @ upstream)
        _accumulate(grads, "out.b", np.array([upstream.sum()]))
        d_z = (upstream[:, None] * self.params["out.w"][None, :]) * _act_grad_from_output(self.config.activation, a)
        w = self.params["head.w"]
        _accumulate(grads, "head.b", d_z.sum(axis=0))
        if self.config.tie_head:
            _accumulate(grads, "head.w", e_s.T @ d_z + e_r.T @ d_z)
            d_es = d_ze = d_z @ w.T
            return d_es, d_ze
        x = np.concatenate([e_s, e_r], axis=1)
        _accumulate(grads, "head.w", x.T @ d_z)
        d_x = d_z @ w.T
        d = self.config.d_hidden
        return d_x[:, :d], d_x[:, d:]

    def forward(self, seed_batch: ItemBatch, cand_batch: ItemBatch):
        if seed_batch.size != cand_batch.size:
            raise ConfigError("seed and candidate batches differ in size")
        e_s, c_s = self.seed_embedder.forward(seed_batch)
        e_r, c_r = self.cand_embedder.forward(cand_batch)
        h, c_h = self.head_forward(e_s, e_r)
        return h, (c_s, c_r, c_h)

    def backward(self, cache, upstream):
        """Parameter gradients of ``sum(upstream * h)``; embedding grads are row-sparse."""
        c_s, c_r, c_h = cache
        upstream = np.asarray(upstream, dtype=np.float64).reshape(-1)
        grads = OrderedDict()
        d_es, d_er = self.head_backward(c_h, upstream, grads)
        self.seed_embedder.backward(c_s, d_es, grads)
        self.cand_embedder.backward(c_r, d_er, grads)
        return grads

    def score_batches(self, seed_batch, cand_batch):
        return self.forward(seed_batch, cand_batch)[0]


def _as_batch(features):
    if isinstance(features, ItemBatch):
        return features
    return ItemBatch.from_features([features])


def embed_item_mean(embedder: ItemEmbedder, features: ItemFeatures) -> np.ndarray:
    """Item vector from an embedder whose feature sets are all mean-pooled."""
    if any(p != "mean" for p in embedder.pooling):
        raise ConfigError("embedder uses RNN pooling; call embed_item_rnn")
    return embedder.embed(features)


def embed_item_rnn(embedder: ItemEmbedder, features: ItemFeatures) -> np.ndarray:
    """Item vector from an embedder with a recurrent title encoder."""
    if "rnn" not in embedder.pooling:
        raise ConfigError("embedder has no recurrent feature set")
    return embedder.embed(features)


def predict_pair(model: DcfModel, s, r) -> float:
    return float(model.forward(_as_batch(s), _as_batch(r))[0][0])


def backward_pair(model: DcfModel, s, r, upstream_grad=1.0):
    """Gradients of ``upstream_grad * h(s, r)`` with respect to every parameter."""
    _, cache = model.forward(_as_batch(s), _as_batch(r))
    return model.backward(cache, np.array([upstream_grad], dtype=np.float64))


# --------------------------------------------------------------------------
# Linear model
# --------------------------------------------------------------------------


class IndicatorPairFeatures:
    """One active feature per ordered pair: ``k = i * n_items + j``."""

    kind = "indicator"

    def __init__(self, n_items):
        if n_items < 1:
            raise ConfigError("n_items must be >= 1")
        self.n_items = int(n_items)

    @property
    def n_features(self):
        return self.n_items * self.n_items

    def index(self, i, j):
        i = np.asarray(i, dtype=np.int64)
        j = np.asarray(j, dtype=np.int64)
        if np.any((i < 0) | (i >= self.n_items) | (j < 0) | (j >= self.n_items)):
            raise IndexError(f"item index out of range [0, {self.n_items})")
        k = i * self.n_items + j
        return k if k.ndim else int(k)

    def encode_pairs(self, seeds, cands, features=None):
        k = np.atleast_1d(self.index(seeds, cands)).astype(np.int64)
        return np.arange(k.shape[0] + 1, dtype=np.int64), k

    def config(self):
        return {"kind": self.kind, "n_items": self.n_items}


class BagPairFeatures:
    """Binary bag of every token of the seed, then every token of the candidate.

    Token ids of each feature set are offset so sets do not collide; the
    candidate block follows the whole seed block.
    """

    kind = "bag"

    def __init__(self, vocab_sizes):
        self.vocab_sizes = tuple(int(v) for v in vocab_sizes)
        self.offsets = np.concatenate([[0], np.cumsum(self.vocab_sizes)]).astype(np.int64)
        self.per_side = int(self.offsets[-1])

    @property
    def n_features(self):
        return 2 * self.per_side

    def _item_tokens(self, batch: ItemBatch):
        b = batch.size
        rows, cols = [], []
        for k, (lengths, flat) in enumerate(batch.sets):
            rows.append(np.repeat(np.arange(b), lengths))
            cols.append(np.asarray(flat, dtype=np.int64) + self.offsets[k])
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        keys = np.unique(rows * self.per_side + cols)
        return keys // self.per_side, keys % self.per_side

    def encode_batches(self, seed_batch, cand_batch):
        rs, cs = self._item_tokens(seed_batch)
        rr, cr = self._item_tokens(cand_batch)
        rows = np.concatenate([rs, rr])
        cols = np.concatenate([cs, cr + self.per_side])
        order = np.lexsort((cols, rows))
        rows, cols = rows[order], cols[order]
        counts = np.bincount(rows, minlength=seed_batch.size)
        return np.concatenate([[0], np.cumsum(counts)]).astype(np.int64), cols

    def encode_pairs(self, seeds, cands, features):
        return self.encode_batches(features.take(seeds), features.take(cands))

    def config(self):
        return {"kind": self.kind, "vocab_sizes": list(self.vocab_sizes)}


class LinearModel:
    """``h(s, r) = theta . x_sr`` over a sparse binary pair featurisation."""

    kind = "linear"

    def __init__(self, featurizer, theta=None):
        self.featurizer = featurizer
        if theta is None:
            theta = np.zeros(featurizer.n_features)
        theta = np.ascontiguousarray(theta, dtype=np.float64)
        if theta.shape != (featurizer.n_features,):
            raise ConfigError(f"theta has shape {theta.shape}, expected ({featurizer.n_features},)")
        self.params = OrderedDict(theta=theta)

    @property
    def theta(self):
        return self.params["theta"]

    def copy_params(self):
        return OrderedDict(theta=self.theta.copy())

    def set_params(self, params):
        self.theta[...] = params["theta"]

    def score_csr(self, indptr, indices):
        contrib = self.theta[indices]
        sums = np.add.reduceat(contrib, indptr[:-1]) if contrib.size else np.zeros(indptr.shape[0] - 1)
        empty = indptr[1:] == indptr[:-1]
        if np.any(empty):
            sums = np.where(empty, 0.0, sums)
        return sums

    def score_indices(self, seeds, cands, features=None):
        return self.score_csr(*self.featurizer.encode_pairs(seeds, cands, features))

    def score_batches(self, seed_batch, cand_batch):
        return self.score_csr(*self.featurizer.encode_batches(seed_batch, cand_batch))

    def forward_csr(self, indptr, indices):
        return self.score_csr(indptr, indices), (indptr, indices)

    def backward(self, cache, upstream):
        indptr, indices = cache
        upstream = np.asarray(upstream, dtype=np.float64).reshape(-1)
        per_entry = np.repeat(upstream, np.diff(indptr))
        return OrderedDict(theta=SparseRows(indices, per_entry))


# --------------------------------------------------------------------------
# Initialisation
# --------------------------------------------------------------------------


@dataclass
class LinearConfig:
    featurizer: str = "indicator"
    n_items: int = 0
    vocab_sizes: tuple = field(default_factory=tuple)

    def build_featurizer(self):
        if self.featurizer == "indicator":
            return IndicatorPairFeatures(self.n_items)
        if self.featurizer == "bag":
            if not self.vocab_sizes:
                raise ConfigError("bag featurizer needs vocabulary sizes")
            return BagPairFeatures(self.vocab_sizes)
        raise ConfigError(f"unknown featurizer {self.featurizer!r}")


def init_model(config, seed=0):
    """Fresh parameters: fan-based uniform matrices, small-uniform embeddings, zero biases.

    Embedding rows are ``U(-emb_init / d_emb, emb_init / d_emb)``.

    A :class:`LinearConfig` gives ``theta = 0``.
    """
    if isinstance(config, LinearConfig):
        return LinearModel(config.build_featurizer())
    if not isinstance(config, DcfConfig):
        raise ConfigError(f"unsupported config {type(config).__name__}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 6])))
    params = OrderedDict()
    for name, shape in config.param_shapes().items():
        if ".emb." in name:
            bound = config.emb_init / config.d_emb
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif len(shape) == 2:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif name == "out.w":
            bound = np.sqrt(6.0 / (shape[0] + 1))
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            params[name] = np.zeros(shape)
    return DcfModel(config, params)


# --------------------------------------------------------------------------
# Serialisation
# --------------------------------------------------------------------------


def _model_header(model, extra):
    if isinstance(model, DcfModel):
        cfg = asdict(model.config)
        cfg["set_names"] = list(cfg["set_names"])
        cfg["vocab_sizes"] = list(cfg["vocab_sizes"])
        cfg["sequential"] = list(cfg["sequential"])
        kind = "dcf"
    elif isinstance(model, LinearModel):
        cfg = model.featurizer.config()
        kind = "linear"
    else:
        raise ConfigError(f"cannot serialise {type(model).__name__}")
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "kind": kind,
        "config": cfg,
        "tensors": [[name, list(p.shape)] for name, p in model.params.items()],
        "extra": extra or {},
    }


def save_model(path, model, extra=None):
    """Write a versioned ``.npz``: a JSON header plus float64 tensors in declared order.

    Zip entries carry a fixed timestamp so identical models give identical bytes.
    """
    header = _model_header(model, extra)
    arrays = {"header": np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)}
    for k, p in enumerate(model.params.values()):
        arrays[f"t{k:04d}"] = np.ascontiguousarray(p, dtype="<f8")
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, arr, allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_model(path):
    """Inverse of :func:`save_model`; returns ``(model, extra)``."""
    try:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(bytes(data["header"]).decode("utf-8"))
            tensors = [np.array(data[f"t{k:04d}"], dtype=np.float64) for k in range(len(header["tensors"]))]
    except (KeyError, ValueError, OSError) as exc:
        raise ModelFormatError(f"unreadable model file {path}: {exc}") from None
    if header.get("format") != FORMAT_NAME or header.get("version") != FORMAT_VERSION:
        raise ModelFormatError(
            f"unsupported model format {header.get('format')!r} version {header.get('version')!r}"
        )
    cfg = header["config"]
    if header["kind"] == "dcf":
        config = DcfConfig(**cfg)
        expected = config.param_shapes()
    elif header["kind"] == "linear":
        featurizer = LinearConfig(
            featurizer=cfg["kind"], n_items=cfg.get("n_items", 0), vocab_sizes=tuple(cfg.get("vocab_sizes", ()))
        ).build_featurizer()
        expected = OrderedDict(theta=(featurizer.n_features,))
    else:
        raise ModelFormatError(f"unknown model kind {header['kind']!r}")
    declared = [(n, tuple(s)) for n, s in header["tensors"]]
    if declared != [(n, tuple(s)) for n, s in expected.items()]:
        raise ModelFormatError("tensor names or shapes do not match the model configuration")
    for (name, shape), arr in zip(declared, tensors):
        if arr.shape != shape:
            raise ModelFormatError(f"tensor {name} stored with shape {arr.shape}, header says {shape}")
    params = OrderedDict((name, arr) for (name, _), arr in zip(declared, tensors))
    if header["kind"] == "dcf":
        model = DcfModel(config, params)
    else:
        model = LinearModel(featurizer, params["theta"])
    return model, header.get("extra", {})
