import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tcube.engine import PROB_SCALE, load_probs, new_probcube, write_probs_manifest
from tcube.errors import ValidationError
from tcube.geo import LonLatAffine, TileGrid
from tcube.smooth import (SmoothParams, bayes_smooth, inverse_logit, label_map, load_label_map,
                          logit_transform, neighborhood_stats, smooth_logits,
                          smooth_probabilities)


def oracle_theta(x, window, sigma, ridge):
    """Pixel-by-pixel reference using explicit windows and np.cov."""
    k, h, w = x.shape
    r = window // 2
    out = np.empty_like(x)
    for i in range(h):
        for j in range(w):
            nb = x[:, max(0, i - r):i + r + 1, max(0, j - r):j + r + 1].reshape(k, -1)
            m = nb.mean(axis=1)
            s = np.cov(nb) if nb.shape[1] > 1 else np.zeros((k, k))
            s = np.atleast_2d(s) + ridge * np.eye(k)
            a = np.linalg.inv(sigma + s)
            out[:, i, j] = sigma @ a @ m + s @ a @ x[:, i, j]
    return out


def write_probs(root, p, tile="T", labels=None):
    k, h, w = p.shape
    labels = labels or [f"c{i}" for i in range(k)]
    Path(root).mkdir(parents=True)
    pc = new_probcube(root, "cube", "local", labels, [TileGrid(tile, h, w, (0.0, 0.0), (10.0, 10.0))],
                      LonLatAffine())
    ints = np.clip(np.rint(p * PROB_SCALE), 0, PROB_SCALE).astype("<i2")
    for i, lab in enumerate(labels):
        pc.path(tile, lab).write_bytes(ints[i].tobytes())
    write_probs_manifest(pc, {"source": "test"})
    return load_probs(root)


def test_logit_values():
    assert logit_transform(np.array(0.5)) == 0.0
    e = np.e / (1 + np.e)
    assert abs(logit_transform(np.array(e), 1e-4) - 1.0) < 1e-9
    eps = 1e-3
    lo = np.log(eps / (1 - eps))
    assert logit_transform(np.array(0.0), eps) == pytest.approx(lo, abs=1e-12)
    assert logit_transform(np.array(1.0), eps) == pytest.approx(-lo, abs=1e-12)
    x = np.linspace(-5, 5, 11)
    assert np.allclose(logit_transform(inverse_logit(x), 1e-6), x)


def test_stats_match_explicit_windows():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 6, 5))
    m, s = neighborhood_stats(x, 3)
    nb = x[:, 0:3, 1:4].reshape(3, -1)
    assert np.allclose(m[1, 2], nb.mean(1))
    assert np.allclose(s[1, 2], np.cov(nb))
    corner = x[:, 0:2, 0:2].reshape(3, -1)
    assert np.allclose(s[0, 0], np.cov(corner))


@pytest.mark.parametrize("window,k", [(1, 2), (3, 4), (5, 3)])
def test_dense_oracle(window, k):
    rng = np.random.default_rng(window + k)
    x = rng.normal(scale=2.0, size=(k, 9, 8))
    a = rng.normal(size=(k, k))
    sigma = a @ a.T + k * np.eye(k)
    got = smooth_logits(x, SmoothParams(window, sigma.tolist(), ridge=1e-6))
    assert np.allclose(got, oracle_theta(x, window, sigma, 1e-6), atol=1e-9)


def test_constant_neighbourhood_returns_input():
    x = np.broadcast_to(np.array([1.0, -2.0, 0.5])[:, None, None], (3, 7, 7)).copy()
    got = smooth_logits(x, SmoothParams(5, 3.0, ridge=1e-9))
    assert np.abs(got - x).max() < 1e-6


def test_isolated_pixel_flips():
    p = np.zeros((2, 7, 7))
    p[0], p[1] = 0.95, 0.05
    p[:, 3, 3] = [0.3, 0.7]
    q = smooth_probabilities(p, SmoothParams(7, 20.0))
    assert np.argmax(p[:, 3, 3]) == 1 and np.argmax(q[:, 3, 3]) == 0
    assert np.all(np.argmax(q, axis=0) == 0)


def test_window_one_keeps_labels():
    rng = np.random.default_rng(3)
    p = rng.dirichlet(np.ones(4), size=(10, 10)).transpose(2, 0, 1)
    q = smooth_probabilities(p, SmoothParams(1, 5.0, eps=1e-6, ridge=0.0))
    assert np.array_equal(np.argmax(q, 0), np.argmax(p, 0))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.permutations(range(3)))
def test_class_permutation_equivariance(seed, perm):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(3), size=(6, 6)).transpose(2, 0, 1)
    params = SmoothParams(3, 4.0)
    a = smooth_probabilities(p, params)
    b = smooth_probabilities(p[list(perm)], params)
    assert np.allclose(a[list(perm)], b, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (1, 5, 5), elements=st.floats(-4, 4)), st.floats(0.1, 50))
def test_single_class_is_convex_blend(x, sig):
    theta = smooth_logits(x, SmoothParams(3, sig, ridge=1e-6))
    m, _ = neighborhood_stats(x, 3)
    lo = np.minimum(x[0], m[..., 0]) - 1e-9
    hi = np.maximum(x[0], m[..., 0]) + 1e-9
    assert np.all((theta[0] >= lo) & (theta[0] <= hi))


def test_large_sigma_pulls_to_mean_small_sigma_keeps_input():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 6, 6))
    m, _ = neighborhood_stats(x, 3)
    big = smooth_logits(x, SmoothParams(3, 1e9))
    assert np.allclose(big, m.transpose(2, 0, 1), atol=1e-6)
    small = smooth_logits(x, SmoothParams(3, 1e-9))
    assert np.allclose(small, x, atol=1e-6)


def test_params_validation():
    for bad in [dict(window=4), dict(window=0), dict(eps=0.0), dict(eps=0.5), dict(ridge=-1)]:
        with pytest.raises(ValidationError):
            SmoothParams(**bad)
    with pytest.raises(ValidationError, match="positive definite"):
        SmoothParams(sigma=[[1, 2], [2, 1]]).sigma_matrix(2)
    with pytest.raises(ValidationError, match="symmetric"):
        SmoothParams(sigma=[[1, 0.5], [0, 1]]).sigma_matrix(2)
    with pytest.raises(ValidationError, match="3x3"):
        SmoothParams(sigma=[[1, 0], [0, 1]]).sigma_matrix(3)


@pytest.fixture
def random_probs(tmp_path):
    rng = np.random.default_rng(11)
    p = rng.dirichlet(np.ones(3) * 0.5, size=(23, 9)).transpose(2, 0, 1)
    return write_probs(tmp_path / "raw", p)


def _bytes(pc):
    return {n: (Path(pc.root) / n).read_bytes() for t in pc.files.values() for n in t.values()}


def test_bayes_smooth_outputs(random_probs, tmp_path):
    out = bayes_smooth(random_probs, SmoothParams(5, 10.0), tmp_path / "smooth")
    s = out.read("T").astype(int)
    assert s.min() >= 0 and s.max() <= PROB_SCALE
    assert np.all(np.abs(s.sum(0) - PROB_SCALE) <= 10)
    doc = json.loads((tmp_path / "smooth" / "probs.json").read_text())
    assert doc["window"] == 5 and doc["labels"] == list(random_probs.labels)
    expected = smooth_probabilities(random_probs.probabilities("T"), SmoothParams(5, 10.0))
    assert np.array_equal(s, np.rint(expected * PROB_SCALE).astype(int))
    with pytest.raises(ValidationError):
        bayes_smooth(random_probs, SmoothParams(), random_probs.root)


@pytest.mark.parametrize("strip", [1, 2, 4, 7])
def test_strips_match_whole_tile(random_probs, tmp_path, strip):
    params = SmoothParams(5, 10.0)
    whole = bayes_smooth(random_probs, params, tmp_path / "whole")
    part = bayes_smooth(random_probs, params, tmp_path / f"s{strip}", strip_rows=strip,
                        workers=2 if strip == 4 else 1)
    assert _bytes(part) == _bytes(whole)


def test_label_map_argmax_and_ties(tmp_path):
    p = np.array([[[0.5, 0.2], [0.1, 1 / 3]],
                  [[0.5, 0.7], [0.1, 1 / 3]],
                  [[0.0, 0.1], [0.8, 1 / 3]]])
    pc = write_probs(tmp_path / "p", p, labels=["a", "b", "c"])
    m = label_map(pc, tmp_path / "map")
    assert m.read("T").tolist() == [[0, 1], [2, 0]]
    assert json.loads((tmp_path / "map" / "legend.json").read_text()) == {"0": "a", "1": "b", "2": "c"}
    head = (tmp_path / "map" / "class_map.ppm").read_bytes()[:11]
    assert head == b"P6\n2 2\n255\n"
    again = load_label_map(tmp_path / "map")
    assert again.legend == ("a", "b", "c") and again.pixel_area == 100.0
    assert again.class_counts().tolist() == [2, 1, 1]
    label_map(pc, tmp_path / "noppm", ppm=False)
    assert not (tmp_path / "noppm" / "class_map.ppm").exists()
