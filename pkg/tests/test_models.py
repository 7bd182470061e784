import struct

import numpy as np
import pytest

from conftest import make_table, separable_table
from tcube.errors import (ModelFormatError, ModelVersionError, TrainingError, ValidationError)
from tcube.models import (ModelKind, get_kind, load_model, model_from_bytes, predict_probs,
                          register_model, save_model, train)
from tcube.models.base import model_bytes
from tcube.models.forest import best_split
from tcube.models.nn import (Conv1D, Dense, Flatten, Network, ReLU, build_mlp, build_tempcnn,
                             stratified_holdout)


def _gini(y, k):
    if len(y) == 0:
        return 0.0
    p = np.bincount(y, minlength=k) / len(y)
    return 1.0 - np.sum(p * p)


class TestBestSplit:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            n = int(rng.integers(2, 30))
            x = rng.integers(0, 6, size=n).astype(np.float32)
            y = rng.integers(0, 3, size=n)
            got = best_split(x, y, 3)
            cands = np.unique(x)
            if cands.size < 2:
                assert got is None
                continue
            best = min(
                (np.sum(x <= t) * _gini(y[x <= t], 3) + np.sum(x > t) * _gini(y[x > t], 3)) / n
                for t in cands[:-1])
            assert got[0] == pytest.approx(best, abs=1e-12)
            lo = cands[cands <= got[1]].max()
            hi = cands[cands > got[1]].min()
            assert lo <= got[1] < hi

    def test_adjacent_floats_threshold(self):
        lo = np.float32(1.0)
        hi = np.nextafter(lo, np.float32(2))
        score, thr = best_split(np.array([lo, hi], dtype=np.float32), np.array([0, 1]), 2)
        assert score == 0.0 and lo <= thr < hi

    def test_min_leaf(self):
        x = np.arange(6, dtype=np.float32)
        y = np.array([0, 1, 1, 1, 1, 1])
        assert best_split(x, y, 2, min_leaf=1)[1] == pytest.approx(0.5)
        assert best_split(x, y, 2, min_leaf=2)[1] == pytest.approx(1.5)


class TestForest:
    def test_separable_and_deterministic(self):
        t = separable_table()
        m1 = train(t, "rf", {"trees": 15}, seed=3)
        m2 = train(t, "rf", {"trees": 15}, seed=3)
        p = predict_probs(m1, t.features())
        assert np.array_equal(p, predict_probs(m2, t.features()))
        assert [m1.labels[i] for i in p.argmax(1)] == t.labels
        assert np.allclose(p.sum(1), 1.0)

    def test_xor_needs_interaction(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, size=(400, 1, 2))
        y = np.where((x[:, 0, 0] > 0) ^ (x[:, 0, 1] > 0), "a", "b")
        m = train(make_table(x, y), "rf", {"trees": 30, "mtry": 2}, seed=0)
        acc = np.mean(np.array(m.labels)[predict_probs(m, x.reshape(400, 2)).argmax(1)] == y)
        assert acc == 1.0

    def test_max_depth_one_is_a_stump(self):
        t = separable_table()
        m = train(t, "rf", {"trees": 3, "max_depth": 1}, seed=0)
        assert np.all(m.params["feature"].reshape(-1)[:1] >= 0)
        assert m.params["feature"].size == 9


class TestContract:
    def test_unknown_kind_and_hyper(self):
        t = separable_table()
        with pytest.raises(ValidationError, match="unknown model kind"):
            train(t, "svm")
        with pytest.raises(ValidationError, match="unknown hyperparameter.*depth"):
            train(t, "rf", {"depth": 3})

    def test_label_requirements(self):
        t = separable_table(n_classes=1)
        with pytest.raises(ValidationError, match="at least 2 labels"):
            train(t, "rf")
        x = np.zeros((3, 2, 1))
        with pytest.raises(ValidationError, match="fewer than 2"):
            train(make_table(x + np.arange(3)[:, None, None], ["a", "a", "b"]), "rf")

    def test_batch_shape_checked(self):
        m = train(separable_table(), "rf", {"trees": 2})
        with pytest.raises(ValidationError, match="model expects"):
            predict_probs(m, np.zeros((3, 5)))
        assert predict_probs(m, np.zeros((0, 12))).shape == (0, 3)

    def test_plugin_kind(self):
        class Const(ModelKind):
            name = "const-test"
            defaults = {"value": 0.25}

            def fit(self, x, y, n_classes, hyper, seed):
                return {"w": np.zeros(1)}

            def predict(self, params, x, n_classes, hyper):
                return np.full((x.shape[0], n_classes), 1.0 / n_classes)

        register_model(Const())
        m = train(separable_table(n_classes=4), "const-test")
        assert np.all(predict_probs(m, np.zeros((2, 12))) == 0.25)

    def test_bad_plugin_output_rejected(self):
        class Bad(ModelKind):
            name = "bad-test"

            def fit(self, x, y, n_classes, hyper, seed):
                return {}

            def predict(self, params, x, n_classes, hyper):
                return np.full((x.shape[0], n_classes), 0.6)

        register_model(Bad())
        m = train(separable_table(n_classes=2), "bad-test")
        with pytest.raises(ValidationError, match="simplex"):
            predict_probs(m, np.zeros((1, 12)))


class TestModelFile:
    @pytest.mark.parametrize("kind,hyper", [("rf", {"trees": 4}),
                                            ("mlp", {"hidden": [8], "epochs": 3}),
                                            ("tempcnn", {"filters": 4, "dense": 8, "kernel_size": 3,
                                                         "conv_layers": 1, "epochs": 2})])
    def test_round_trip_same_predictions(self, tmp_path, kind, hyper):
        t = separable_table()
        m = train(t, kind, hyper, seed=1)
        save_model(m, tmp_path / "m.tcm")
        m2 = load_model(tmp_path / "m.tcm")
        assert (m2.kind, m2.labels, m2.layout, m2.norm) == (m.kind, m.labels, m.layout, m.norm)
        assert np.array_equal(predict_probs(m, t.features()), predict_probs(m2, t.features()))
        assert model_bytes(m2) == model_bytes(m)

    def test_corrupt_files(self):
        raw = model_bytes(train(separable_table(), "rf", {"trees": 2}))
        with pytest.raises(ModelFormatError, match="bad magic"):
            model_from_bytes(b"NOTMODEL" + raw[8:])
        with pytest.raises(ModelFormatError, match="truncated"):
            model_from_bytes(raw[:-3])
        newer = raw[:8] + struct.pack("<I", 99) + raw[12:]
        with pytest.raises(ModelVersionError, match="newer"):
            model_from_bytes(newer)


def _grad_check(net, x, y, seed=0):
    rng = np.random.default_rng(seed)
    params = net.init_params(rng)
    for k in params:  # nonzero biases so their gradients are exercised
        params[k] = params[k] + 0.1 * rng.standard_normal(params[k].shape)
    _, grads = net.loss_and_grads(params, x, y)
    h = 1e-6
    worst = {}
    for name, p in params.items():
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            lp, _ = net.loss_and_grads(params, x, y)
            p[idx] = old - h
            lm, _ = net.loss_and_grads(params, x, y)
            p[idx] = old
            num[idx] = (lp - lm) / (2 * h)
        denom = max(np.max(np.abs(num)), np.max(np.abs(grads[name])), 1e-8)
        worst[name] = float(np.max(np.abs(num - grads[name])) / denom)
    return worst


def mlp_grad_errors():
    rng = np.random.default_rng(5)
    net = build_mlp(3, 2, 3, {"hidden": [5, 4], "dropout": 0.0})
    return _grad_check(net, rng.standard_normal((7, 3, 2)), rng.integers(0, 3, 7))


def tempcnn_grad_errors():
    rng = np.random.default_rng(6)
    net = build_tempcnn(6, 2, 3, {"conv_layers": 2, "filters": 3, "kernel_size": 3,
                                  "dropout": 0.0, "dense": 4})
    return _grad_check(net, rng.standard_normal((5, 6, 2)), rng.integers(0, 3, 5))


class TestGradients:
    def test_mlp(self):
        errs = mlp_grad_errors()
        assert set(errs) == {"dense0.W", "dense0.b", "dense1.W", "dense1.b", "out.W", "out.b"}
        assert max(errs.values()) < 1e-5, errs

    def test_tempcnn(self):
        errs = tempcnn_grad_errors()
        assert {"conv0.W", "conv1.b", "dense.W", "out.b"} <= set(errs)
        assert max(errs.values()) < 1e-5, errs

    def test_even_kernel_conv(self):
        rng = np.random.default_rng(7)
        net = Network([Conv1D("c", 2, 2, 4), ReLU(), Flatten(), Dense("o", 10, 2)], flat_input=False)
        errs = _grad_check(net, rng.standard_normal((3, 5, 2)), rng.integers(0, 2, 3))
        assert max(errs.values()) < 1e-5, errs


class TestNetworks:
    def test_mlp_learns_xor(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, size=(1000, 1, 2))
        y = np.where((x[:, 0, 0] > 0) ^ (x[:, 0, 1] > 0), "a", "b")
        m = train(make_table(x, y), "mlp", {"hidden": [32, 16], "epochs": 150, "patience": 30,
                                            "learning_rate": 5e-3}, seed=0)
        acc = np.mean(np.array(m.labels)[predict_probs(m, x.reshape(1000, 2)).argmax(1)] == y)
        assert acc >= 0.95

    def test_tempcnn_uses_temporal_order(self):
        # both classes share the same multiset of values; only the peak position differs
        rng = np.random.default_rng(1)
        base = np.exp(-0.5 * ((np.arange(12) - 3) / 1.2) ** 2)
        early = base + 0.05 * rng.standard_normal((80, 12))
        late = base[::-1] + 0.05 * rng.standard_normal((80, 12))
        x = np.concatenate([early, late])[:, :, None]
        y = ["early"] * 80 + ["late"] * 80
        m = train(make_table(x, y), "tempcnn", {"filters": 8, "dense": 16, "epochs": 30,
                                                "conv_layers": 2}, seed=0)
        acc = np.mean(np.array(m.labels)[predict_probs(m, x.reshape(160, 12)).argmax(1)] == y)
        assert acc >= 0.95

    def test_prediction_independent_of_batching(self):
        t = separable_table(n_per_class=200)
        m = train(t, "mlp", {"hidden": [16], "epochs": 2}, seed=0)
        f = t.features()
        whole = predict_probs(m, f)
        parts = np.concatenate([predict_probs(m, f[i:i + 37]) for i in range(0, len(f), 37)])
        assert np.array_equal(whole, parts)

    def test_tempcnn_too_short(self):
        t = separable_table(t=3)
        with pytest.raises(TrainingError, match="kernel_size"):
            train(t, "tempcnn", {"kernel_size": 5})

    def test_divergence_reported(self):
        t = separable_table(spread=1.0)
        with pytest.raises(TrainingError, match="non-finite"):
            train(t, "mlp", {"learning_rate": 1e300, "epochs": 5}, seed=0)

    def test_early_stopping_keeps_best(self):
        t = separable_table(n_per_class=40, spread=2.0)
        m = train(t, "mlp", {"hidden": [64], "epochs": 200, "patience": 3}, seed=0)
        assert np.all(np.isfinite(predict_probs(m, t.features())))

    def test_stratified_holdout(self):
        y = np.array([0] * 10 + [1] * 5 + [2] * 2)
        tr, va = stratified_holdout(y, 0.2, np.random.default_rng(0))
        assert sorted(np.bincount(y[va], minlength=3)) == [0, 1, 2]
        assert set(tr) | set(va) == set(range(17)) and not set(tr) & set(va)

    def test_mlp_seed_determinism(self):
        t = separable_table()
        h = {"hidden": [8], "epochs": 5}
        a = train(t, "mlp", h, seed=4).params
        b = train(t, "mlp", h, seed=4).params
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_registry(self):
        assert get_kind("tempcnn").defaults["kernel_size"] == 5
