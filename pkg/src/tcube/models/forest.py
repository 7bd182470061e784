"""Random forest of CART trees with Gini splits."""

from __future__ import annotations

import math

import numpy as np

from .base import ModelKind, register_model

LEAF = -1


def best_split(xs: np.ndarray, y: np.ndarray, n_classes: int, min_leaf: int = 1):
    """Exhaustive Gini split search on one feature.

    Returns ``(impurity, threshold)`` for the split minimizing the weighted
    Gini impurity, or None when the feature is constant on this node.
    Samples with ``x <= threshold`` go left.
    """
    n = xs.size
    order = np.argsort(xs, kind="stable")
    xs = xs[order]
    ys = y[order]
    left = np.cumsum(np.eye(n_classes, dtype=np.float64)[ys], axis=0)[:-1]
    pos = np.arange(n - 1)
    ok = (xs[:-1] < xs[1:]) & (pos + 1 >= min_leaf) & (n - pos - 1 >= min_leaf)
    if not ok.any():
        return None
    total = left[-1] + np.eye(n_classes)[ys[-1]]
    nl = (pos + 1).astype(np.float64)
    nr = n - nl
    right = total - left
    gini_l = 1.0 - np.sum((left / nl[:, None]) ** 2, axis=1)
    gini_r = 1.0 - np.sum((right / nr[:, None]) ** 2, axis=1)
    score = np.where(ok, (nl * gini_l + nr * gini_r) / n, np.inf)
    i = int(np.argmin(score))
    lo, hi = xs[i], xs[i + 1]
    thr = np.float32(lo + (hi - lo) / np.float32(2))
    if not lo <= thr < hi:
        thr = lo
    return float(score[i]), thr


def build_tree(x: np.ndarray, y: np.ndarray, n_classes: int, mtry: int, rng: np.random.Generator,
               max_depth: int | None = None, min_leaf: int = 1):
    """Grow one tree; returns parallel node arrays (feature, threshold, left, right, value)."""
    n_features = x.shape[1]
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(idx):
        counts = np.bincount(y[idx], minlength=n_classes).astype(np.float64)
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        value.append(counts / counts.sum())
        return len(feature) - 1

    root = new_node(np.arange(y.size))
    stack = [(root, np.arange(y.size), 0)]
    while stack:
        node, idx, depth = stack.pop()
        if np.all(y[idx] == y[idx[0]]) or idx.size < 2 * min_leaf:
            continue
        if max_depth is not None and depth >= max_depth:
            continue
        best = None
        visited = 0
        # keep drawing features until mtry non-constant ones were examined
        for f in rng.permutation(n_features):
            res = best_split(x[idx, f], y[idx], n_classes, min_leaf)
            if res is None:
                continue
            visited += 1
            if best is None or res[0] < best[0]:
                best = (res[0], int(f), res[1])
            if visited >= mtry:
                break
        if best is None:
            continue
        _, f, thr = best
        go_left = x[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        feature[node] = f
        threshold[node] = float(thr)
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return (np.array(feature, dtype=np.int64), np.array(threshold, dtype=np.float32),
            np.array(left, dtype=np.int64), np.array(right, dtype=np.int64), np.array(value))


class RandomForest(ModelKind):
    name = "rf"
    defaults = {"trees": 100, "mtry": None, "max_depth": None, "min_samples_leaf": 1,
                "bootstrap": True}

    def fit(self, x, y, n_classes, hyper, seed):
        x = x.reshape(x.shape[0], -1).astype(np.float32)
        n, n_features = x.shape
        mtry = hyper["mtry"] or max(1, math.isqrt(n_features))
        feats, thrs, lefts, rights, values, roots = [], [], [], [], [], []
        offset = 0
        for t in range(int(hyper["trees"])):
            rng = np.random.default_rng(seed + t)
            rows = rng.integers(0, n, size=n) if hyper["bootstrap"] else np.arange(n)
            f, thr, lft, rgt, val = build_tree(x[rows], y[rows], n_classes, int(mtry), rng,
                                              hyper["max_depth"], int(hyper["min_samples_leaf"]))
            roots.append(offset)
            feats.append(f)
            thrs.append(thr)
            lefts.append(np.where(lft >= 0, lft + offset, LEAF))
            rights.append(np.where(rgt >= 0, rgt + offset, LEAF))
            values.append(val)
            offset += f.size
        return {"roots": np.array(roots), "feature": np.concatenate(feats),
                "threshold": np.concatenate(thrs), "left": np.concatenate(lefts),
                "right": np.concatenate(rights), "value": np.concatenate(values)}

    def predict(self, params, x, n_classes, hyper):
        x = x.reshape(x.shape[0], -1).astype(np.float32)
        feature = params["feature"].astype(np.int64)
        threshold = params["threshold"]
        left = params["left"].astype(np.int64)
        right = params["right"].astype(np.int64)
        value = params["value"].astype(np.float64)
        roots = params["roots"].astype(np.int64)
        rows = np.arange(x.shape[0])
        acc = np.zeros((x.shape[0], n_classes))
        for root in roots:
            node = np.full(x.shape[0], root)
            while True:
                f = feature[node]
                active = f >= 0
                if not active.any():
                    break
                fa = np.where(active, f, 0)
                go_left = x[rows, fa] <= threshold[node]
                node = np.where(active, np.where(go_left, left[node], right[node]), node)
            acc += value[node]
        return acc / len(roots)


register_model(RandomForest())
