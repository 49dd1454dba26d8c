import json
import zipfile

import numpy as np
import pytest

from sparse_cf.corpus import ItemBatch, ItemFeatures
from sparse_cf.exceptions import ConfigError, ModelFormatError
from sparse_cf.nn import (
    BagPairFeatures,
    DcfConfig,
    DcfModel,
    EmbeddingTable,
    IndicatorPairFeatures,
    LinearConfig,
    LinearModel,
    RnnEncoder,
    backward_pair,
    dense_gradients,
    embed_item_mean,
    embed_item_rnn,
    init_model,
    load_model,
    predict_pair,
    save_model,
)

REL_FLOOR = 1e-6  # gradients below this magnitude are compared absolutely


def random_config(rng, arch):
    n_sets = int(rng.integers(1, 4))
    sequential = [False] * n_sets
    if arch == "dcf-rnn":
        sequential[int(rng.integers(n_sets))] = True
    return DcfConfig(
        set_names=tuple(f"f{k}" for k in range(n_sets)),
        vocab_sizes=tuple(int(v) for v in rng.integers(2, 21, size=n_sets)),
        sequential=tuple(sequential),
        arch=arch,
        d_emb=int(rng.integers(1, 9)),
        d_hidden=int(rng.integers(1, 9)),
        d_head=int(rng.integers(1, 9)),
        d_rnn=int(rng.integers(1, 9)),
        tied=bool(rng.integers(2)),
    )


def random_item(rng, config):
    return ItemFeatures(tuple(
        rng.integers(0, v, size=int(rng.integers(0, 6))) for v in config.vocab_sizes
    ))


def randomize(model, rng, scale=0.7):
    for p in model.params.values():
        p[...] = rng.normal(scale=scale, size=p.shape)


def max_relative_error(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom))


def numeric_gradients(f, params, eps=1e-5):
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            up = f()
            p[idx] = old - eps
            down = f()
            p[idx] = old
            g[idx] = (up - down) / (2 * eps)
        out[name] = g
    return out


def dcf_gradient_error(seed, arch):
    rng = np.random.default_rng(seed)
    config = random_config(rng, arch)
    model = init_model(config, seed)
    randomize(model, rng)
    s, r = random_item(rng, config), random_item(rng, config)
    upstream = float(rng.normal())
    analytic = dense_gradients(model.params, backward_pair(model, s, r, upstream))
    numeric = numeric_gradients(lambda: upstream * predict_pair(model, s, r), model.params)
    return max(max_relative_error(analytic.get(n, np.zeros_like(g)), g) for n, g in numeric.items())


def linear_gradient_error(seed, kind):
    rng = np.random.default_rng(seed)
    if kind == "indicator":
        n = int(rng.integers(2, 6))
        model = LinearModel(IndicatorPairFeatures(n))
        pair = (np.array([rng.integers(n)]), np.array([rng.integers(n)]))
        randomize(model, rng)

        def h():
            return float(model.score_indices(*pair)[0])

        indptr, indices = model.featurizer.encode_pairs(*pair)
    else:
        vocab = tuple(int(v) for v in rng.integers(2, 21, size=2))
        model = LinearModel(BagPairFeatures(vocab))
        randomize(model, rng)
        s = ItemBatch.from_features([ItemFeatures(tuple(rng.integers(0, v, size=3) for v in vocab))])
        r = ItemBatch.from_features([ItemFeatures(tuple(rng.integers(0, v, size=2) for v in vocab))])

        def h():
            return float(model.score_batches(s, r)[0])

        indptr, indices = model.featurizer.encode_batches(s, r)
    _, cache = model.forward_csr(indptr, indices)
    analytic = dense_gradients(model.params, model.backward(cache, np.array([1.0])))
    numeric = numeric_gradients(h, model.params)
    return max_relative_error(analytic["theta"], numeric["theta"])


class TestGradients:
    @pytest.mark.parametrize("seed", range(20))
    def test_dcf_mean(self, seed):
        assert dcf_gradient_error(seed, "dcf-mean") < 1e-4

    @pytest.mark.parametrize("seed", range(20))
    def test_dcf_rnn(self, seed):
        assert dcf_gradient_error(100 + seed, "dcf-rnn") < 1e-4

    @pytest.mark.parametrize("seed", range(20))
    def test_linear(self, seed):
        assert linear_gradient_error(seed, "indicator" if seed % 2 else "bag") < 1e-4

    def test_zero_upstream(self):
        rng = np.random.default_rng(0)
        config = random_config(rng, "dcf-rnn")
        model = init_model(config, 0)
        grads = dense_gradients(model.params, backward_pair(model, random_item(rng, config), random_item(rng, config), 0.0))
        assert all(not np.any(g) for g in grads.values())

    def test_untouched_rows_zero(self):
        config = DcfConfig(("t",), (10,), d_emb=3, d_hidden=3, d_head=3)
        model = init_model(config, 0)
        randomize(model, np.random.default_rng(1))
        s = ItemFeatures((np.array([1, 2]),))
        r = ItemFeatures((np.array([3]),))
        grads = dense_gradients(model.params, backward_pair(model, s, r, 1.0))
        seed_rows = np.flatnonzero(np.any(grads["seed.emb.t"] != 0, axis=1))
        cand_rows = np.flatnonzero(np.any(grads["cand.emb.t"] != 0, axis=1))
        np.testing.assert_array_equal(seed_rows, [1, 2])
        np.testing.assert_array_equal(cand_rows, [3])

    def test_forward_backward_deterministic(self):
        rng = np.random.default_rng(5)
        config = random_config(rng, "dcf-rnn")
        model = init_model(config, 3)
        randomize(model, rng)
        s, r = random_item(rng, config), random_item(rng, config)
        g1 = dense_gradients(model.params, backward_pair(model, s, r, 1.0))
        g2 = dense_gradients(model.params, backward_pair(model, s, r, 1.0))
        for name in g1:
            np.testing.assert_array_equal(g1[name], g2[name])


class TestEmbedding:
    def test_single_token_pool_is_row(self):
        table = EmbeddingTable(np.arange(12.0).reshape(4, 3))
        pooled, _ = table.mean_pool(np.array([1]), np.array([2]))
        np.testing.assert_array_equal(pooled[0], [6.0, 7.0, 8.0])

    def test_empty_set_pools_to_zero(self):
        table = EmbeddingTable(np.ones((4, 3)))
        pooled, _ = table.mean_pool(np.array([0, 1]), np.array([2]))
        np.testing.assert_array_equal(pooled[0], 0.0)

    def test_out_of_range(self):
        config = DcfConfig(("t",), (4,), d_emb=2, d_hidden=2, d_head=2)
        model = init_model(config, 0)
        with pytest.raises(IndexError):
            embed_item_mean(model.seed_embedder, ItemFeatures((np.array([7]),)))

    def test_zero_params_zero_output(self):
        config = DcfConfig(("t", "c"), (5, 3), d_emb=2, d_hidden=3, d_head=4)
        model = DcfModel(config)
        item = ItemFeatures((np.array([1, 2]), np.array([1])))
        np.testing.assert_array_equal(embed_item_mean(model.seed_embedder, item), 0.0)
        assert predict_pair(model, item, item) == 0.0

    def test_bag_permutation_and_duplication(self):
        rng = np.random.default_rng(2)
        config = DcfConfig(("t", "c"), (9, 6), d_emb=4, d_hidden=5, d_head=3)
        model = init_model(config, 0)
        randomize(model, rng)
        a = ItemFeatures((np.array([1, 4, 7]), np.array([2, 5])))
        b = ItemFeatures((np.array([7, 1, 4]), np.array([5, 2])))
        c = ItemFeatures((np.array([1, 1, 4, 4, 7, 7]), np.array([2, 5, 2, 5])))
        ea = embed_item_mean(model.seed_embedder, a)
        np.testing.assert_allclose(embed_item_mean(model.seed_embedder, b), ea, atol=1e-14)
        np.testing.assert_allclose(embed_item_mean(model.seed_embedder, c), ea, atol=1e-14)
        assert np.all(np.abs(ea) < 1)

    def test_rnn_single_step(self):
        rng = np.random.default_rng(3)
        w_in, w_rec, b = rng.normal(size=(3, 2)), rng.normal(size=(2, 2)), rng.normal(size=2)
        x = rng.normal(size=(1, 3))
        out, _ = RnnEncoder(w_in, w_rec, b).forward(np.array([1]), x)
        np.testing.assert_allclose(out[0], np.tanh(x[0] @ w_in + b), atol=1e-15)

    def test_rnn_order_sensitivity(self):
        rng = np.random.default_rng(4)
        config = DcfConfig(("title", "c"), (9, 6), sequential=(True, False), arch="dcf-rnn",
                           d_emb=4, d_hidden=5, d_head=3, d_rnn=4)
        model = init_model(config, 0)
        randomize(model, rng)
        base = ItemFeatures((np.array([1, 2, 3]), np.array([1, 4])))
        bag_swapped = ItemFeatures((np.array([1, 2, 3]), np.array([4, 1])))
        title_swapped = ItemFeatures((np.array([3, 2, 1]), np.array([1, 4])))
        e = embed_item_rnn(model.seed_embedder, base)
        np.testing.assert_allclose(embed_item_rnn(model.seed_embedder, bag_swapped), e, atol=1e-14)
        assert not np.allclose(embed_item_rnn(model.seed_embedder, title_swapped), e)

    def test_rnn_pooling_checks(self):
        mean_model = init_model(DcfConfig(("t",), (4,), d_emb=2, d_hidden=2, d_head=2), 0)
        with pytest.raises(ConfigError):
            embed_item_rnn(mean_model.seed_embedder, ItemFeatures((np.array([1]),)))

    def test_rnn_batch_matches_single(self):
        rng = np.random.default_rng(8)
        config = DcfConfig(("title",), (9,), sequential=(True,), arch="dcf-rnn", d_emb=3, d_hidden=3, d_head=3, d_rnn=3)
        model = init_model(config, 0)
        randomize(model, rng)
        items = [ItemFeatures((np.array(t),)) for t in ([1, 2, 3], [4], [], [5, 6])]
        batch = model.embed(ItemBatch.from_features(items))
        for k, item in enumerate(items):
            np.testing.assert_allclose(batch[k], embed_item_rnn(model.seed_embedder, item), atol=1e-14)


class TestPredictPair:
    def test_untied_asymmetric(self):
        rng = np.random.default_rng(6)
        config = DcfConfig(("t",), (9,), d_emb=4, d_hidden=4, d_head=4)
        model = init_model(config, 0)
        randomize(model, rng)
        a, b = ItemFeatures((np.array([1, 2]),)), ItemFeatures((np.array([5]),))
        assert predict_pair(model, a, b) != pytest.approx(predict_pair(model, b, a))

    def test_tied_symmetric(self):
        rng = np.random.default_rng(7)
        config = DcfConfig(("t",), (9,), d_emb=4, d_hidden=4, d_head=4, tied=True, tie_head=True)
        model = init_model(config, 0)
        randomize(model, rng)
        a, b = ItemFeatures((np.array([1, 2]),)), ItemFeatures((np.array([5]),))
        assert predict_pair(model, a, b) == pytest.approx(predict_pair(model, b, a), abs=1e-14)
        assert model.seed_embedder is model.cand_embedder

    def test_schema_mismatch(self):
        model = init_model(DcfConfig(("t", "c"), (4, 4), d_emb=2, d_hidden=2, d_head=2), 0)
        with pytest.raises(ConfigError):
            predict_pair(model, ItemFeatures((np.array([1]),)), ItemFeatures((np.array([1]),)))


class TestInit:
    def test_default_dims(self):
        config = DcfConfig(("title", "cat"), (50, 10), sequential=(True, False), arch="dcf-rnn")
        assert (config.d_emb, config.d_hidden, config.d_head, config.d_rnn) == (200, 400, 1200, 200)
        shapes = config.param_shapes()
        assert shapes["seed.dense.w"] == (400, 400)
        assert shapes["head.w"] == (800, 1200)
        assert shapes["seed.rnn.title.w_rec"] == (200, 200)

    def test_same_seed_identical(self):
        config = DcfConfig(("t",), (9,), d_emb=4, d_hidden=4, d_head=4)
        a, b = init_model(config, 11), init_model(config, 11)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])

    def test_bounds(self):
        config = DcfConfig(("t",), (50,), d_emb=10, d_hidden=20, d_head=30)
        model = init_model(config, 0)
        assert np.abs(model.params["seed.emb.t"]).max() <= 0.5 / 10
        assert np.abs(model.params["seed.dense.w"]).max() <= np.sqrt(6 / 30)
        assert np.abs(model.params["head.w"]).max() <= np.sqrt(6 / 70)
        assert not np.any(model.params["head.b"])
        assert not np.any(model.params["out.b"])

    @pytest.mark.parametrize("field", ["d_emb", "d_hidden", "d_head", "d_rnn"])
    def test_nonpositive(self, field):
        with pytest.raises(ConfigError):
            DcfConfig(("t",), (9,), **{field: 0})

    def test_linear_zero(self):
        model = init_model(LinearConfig("indicator", n_items=5))
        np.testing.assert_array_equal(model.score_indices(np.arange(5), np.arange(5)[::-1]), 0.0)


class TestIndicatorFeatures:
    def test_formula(self):
        f = IndicatorPairFeatures(100)
        assert f.index(2, 3) == 203
        assert f.index(0, 0) == 0

    def test_injective(self):
        f = IndicatorPairFeatures(7)
        i, j = np.divmod(np.arange(49), 7)
        assert len(set(f.index(i, j).tolist())) == 49

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            IndicatorPairFeatures(5).index(5, 0)

    def test_bag_binary_dedup(self):
        f = BagPairFeatures((5, 3))
        s = ItemBatch.from_features([ItemFeatures((np.array([1, 1, 2]), np.array([2])))])
        r = ItemBatch.from_features([ItemFeatures((np.array([1]), np.array([])))])
        indptr, indices = f.encode_batches(s, r)
        np.testing.assert_array_equal(indptr, [0, 4])
        np.testing.assert_array_equal(indices, [1, 2, 5 + 2, 8 + 1])


class TestSerialization:
    def make(self):
        config = DcfConfig(("title", "c"), (7, 4), sequential=(True, False), arch="dcf-rnn",
                           d_emb=3, d_hidden=4, d_head=5, d_rnn=2)
        model = init_model(config, 1)
        randomize(model, np.random.default_rng(0))
        return model

    def test_roundtrip(self, tmp_path):
        model = self.make()
        save_model(tmp_path / "m.npz", model, {"note": "x"})
        loaded, extra = load_model(tmp_path / "m.npz")
        assert extra == {"note": "x"}
        assert loaded.config == model.config
        for name in model.params:
            np.testing.assert_array_equal(loaded.params[name], model.params[name])

    def test_linear_roundtrip(self, tmp_path):
        model = LinearModel(IndicatorPairFeatures(3), np.arange(9.0))
        save_model(tmp_path / "m.npz", model)
        loaded, _ = load_model(tmp_path / "m.npz")
        np.testing.assert_array_equal(loaded.theta, np.arange(9.0))

    def test_bytes_deterministic(self, tmp_path):
        model = self.make()
        save_model(tmp_path / "a.npz", model)
        save_model(tmp_path / "b.npz", model)
        assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()

    def _rewrite_header(self, src, dst, edit):
        with zipfile.ZipFile(src) as zin, zipfile.ZipFile(dst, "w") as zout:
            for info in zin.infolist():
                data = zin.read(info.filename)
                if info.filename == "header.npy":
                    import io
                    arr = np.load(io.BytesIO(data))
                    header = json.loads(bytes(arr).decode())
                    edit(header)
                    buf = io.BytesIO()
                    np.save(buf, np.frombuffer(json.dumps(header).encode(), dtype=np.uint8))
                    data = buf.getvalue()
                zout.writestr(info, data)

    def test_version_mismatch(self, tmp_path):
        save_model(tmp_path / "m.npz", self.make())
        self._rewrite_header(tmp_path / "m.npz", tmp_path / "bad.npz", lambda h: h.update(version=99))
        with pytest.raises(ModelFormatError):
            load_model(tmp_path / "bad.npz")

    def test_shape_mismatch(self, tmp_path):
        save_model(tmp_path / "m.npz", self.make())

        def edit(h):
            h["config"]["d_emb"] = 4
        self._rewrite_header(tmp_path / "m.npz", tmp_path / "bad.npz", edit)
        with pytest.raises(ModelFormatError):
            load_model(tmp_path / "bad.npz")

    def test_garbage(self, tmp_path):
        (tmp_path / "m.npz").write_bytes(b"not a model")
        with pytest.raises(ModelFormatError):
            load_model(tmp_path / "m.npz")
