"""Multilayer perceptron and TempCNN with hand-written backpropagation.

Networks are small stacks of layers operating on float64 arrays.  Each layer
caches what its backward pass needs; ``Network.loss_and_grads`` runs one
forward/backward pass of softmax cross-entropy, which is also what the
gradient checks exercise.
"""

from __future__ import annotations

import logging

import numpy as np

from ..errors import TrainingError
from .base import ModelKind, register_model

log = logging.getLogger(__name__)

PREDICT_BLOCK = 256


class Dense:
    def __init__(self, name, n_in, n_out):
        self.name, self.n_in, self.n_out = name, n_in, n_out

    def param_shapes(self):
        return {f"{self.name}.W": (self.n_in, self.n_out), f"{self.name}.b": (self.n_out,)}

    def forward(self, p, x, train, rng):
        self.x = x
        return x @ p[f"{self.name}.W"] + p[f"{self.name}.b"]

    def backward(self, p, g, grads):
        grads[f"{self.name}.W"] = self.x.T @ g
        grads[f"{self.name}.b"] = g.sum(axis=0)
        return g @ p[f"{self.name}.W"].T


class Conv1D:
    """Stride-1 'same' convolution along time; input (n, time, channels)."""

    def __init__(self, name, c_in, c_out, kernel):
        self.name, self.c_in, self.c_out, self.k = name, c_in, c_out, kernel
        self.pad_l = (kernel - 1) // 2
        self.pad_r = kernel - 1 - self.pad_l

    def param_shapes(self):
        return {f"{self.name}.W": (self.k, self.c_in, self.c_out), f"{self.name}.b": (self.c_out,)}

    def forward(self, p, x, train, rng):
        n, t, c = x.shape
        xp = np.pad(x, ((0, 0), (self.pad_l, self.pad_r), (0, 0)))
        cols = np.stack([xp[:, j:j + t, :] for j in range(self.k)], axis=2)
        self.cols = cols.reshape(n * t, self.k * c)
        self.shape = (n, t)
        w = p[f"{self.name}.W"].reshape(self.k * c, self.c_out)
        return (self.cols @ w + p[f"{self.name}.b"]).reshape(n, t, self.c_out)

    def backward(self, p, g, grads):
        n, t = self.shape
        g2 = g.reshape(n * t, self.c_out)
        w = p[f"{self.name}.W"].reshape(self.k * self.c_in, self.c_out)
        grads[f"{self.name}.W"] = (self.cols.T @ g2).reshape(self.k, self.c_in, self.c_out)
        grads[f"{self.name}.b"] = g2.sum(axis=0)
        dcols = (g2 @ w.T).reshape(n, t, self.k, self.c_in)
        dxp = np.zeros((n, t + self.k - 1, self.c_in))
        for j in range(self.k):
            dxp[:, j:j + t, :] += dcols[:, :, j, :]
        return dxp[:, self.pad_l:self.pad_l + t, :]


class ReLU:
    def param_shapes(self):
        return {}

    def forward(self, p, x, train, rng):
        self.mask = x > 0
        return x * self.mask

    def backward(self, p, g, grads):
        return g * self.mask


class Dropout:
    def __init__(self, rate):
        self.rate = rate

    def param_shapes(self):
        return {}

    def forward(self, p, x, train, rng):
        if not train or self.rate <= 0:
            self.scale = None
            return x
        keep = 1.0 - self.rate
        self.scale = (rng.random(x.shape) < keep) / keep
        return x * self.scale

    def backward(self, p, g, grads):
        return g if self.scale is None else g * self.scale


class Flatten:
    def param_shapes(self):
        return {}

    def forward(self, p, x, train, rng):
        self.shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, p, g, grads):
        return g.reshape(self.shape)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class Network:
    def __init__(self, layers, flat_input: bool):
        self.layers = layers
        self.flat_input = flat_input

    def param_shapes(self) -> dict:
        shapes = {}
        for layer in self.layers:
            shapes.update(layer.param_shapes())
        return shapes

    def init_params(self, rng: np.random.Generator) -> dict:
        params = {}
        for name, shape in self.param_shapes().items():
            if name.endswith(".b"):
                params[name] = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[:-1]))
                params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        return params

    def _prep(self, x):
        x = np.asarray(x, dtype=np.float64)
        return x.reshape(x.shape[0], -1) if self.flat_input else x

    def logits(self, params, x, train=False, rng=None):
        h = self._prep(x)
        for layer in self.layers:
            h = layer.forward(params, h, train, rng)
        return h

    def loss_and_grads(self, params, x, y, train=False, rng=None):
        """Mean softmax cross-entropy over the batch and its parameter gradients."""
        z = self.logits(params, x, train, rng)
        p = softmax(z)
        n = z.shape[0]
        loss = -float(np.mean(np.log(np.clip(p[np.arange(n), y], 1e-300, None))))
        g = p.copy()
        g[np.arange(n), y] -= 1.0
        g /= n
        grads = {}
        for layer in reversed(self.layers):
            g = layer.backward(params, g, grads)
        return loss, grads

    def predict(self, params, x):
        """Softmax probabilities computed in fixed-size zero-padded blocks.

        Padding keeps every matrix product the same shape, so a row's output
        does not depend on which other rows share its batch.
        """
        x = np.asarray(x, dtype=np.float64)
        n = x.shape[0]
        out = np.empty((n, 0))
        parts = []
        for s in range(0, n, PREDICT_BLOCK):
            blk = x[s:s + PREDICT_BLOCK]
            m = blk.shape[0]
            if m < PREDICT_BLOCK:
                blk = np.concatenate([blk, np.zeros((PREDICT_BLOCK - m,) + blk.shape[1:])])
            parts.append(softmax(self.logits(params, blk))[:m])
        return np.concatenate(parts) if parts else out


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def stratified_holdout(y: np.ndarray, fraction: float, rng: np.random.Generator):
    """Split indices into (train, validation), taking ``fraction`` of each class."""
    train_idx, val_idx = [], []
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        k = int(round(fraction * idx.size))
        k = min(k, idx.size - 1)
        val_idx.append(idx[:k])
        train_idx.append(idx[k:])
    return np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(val_idx))


def fit_network(net: Network, x: np.ndarray, y: np.ndarray, hyper: dict, seed: int) -> dict:
    """Mini-batch Adam with early stopping on a stratified validation split."""
    rng = np.random.default_rng(seed)
    params = net.init_params(rng)
    tr, va = stratified_holdout(y, hyper["validation_split"], rng)
    opt = Adam(params, hyper["learning_rate"], hyper["beta1"], hyper["beta2"], hyper["epsilon"])
    batch = int(hyper["batch_size"])
    best, best_loss, stale = None, np.inf, 0
    for epoch in range(int(hyper["epochs"])):
        order = rng.permutation(tr)
        for s in range(0, order.size, batch):
            b = order[s:s + batch]
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = net.loss_and_grads(params, x[b], y[b], train=True, rng=rng)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}, batch {s // batch} "
                                    f"(learning_rate={hyper['learning_rate']})")
            opt.step(params, grads)
        if va.size == 0:
            continue
        with np.errstate(over="ignore", invalid="ignore"):
            val_loss, _ = net.loss_and_grads(params, x[va], y[va])
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        if val_loss < best_loss:
            best_loss, stale = val_loss, 0
            best = {k: v.copy() for k, v in params.items()}
        else:
            stale += 1
            if stale >= int(hyper["patience"]):
                log.info("early stop at epoch %d (best validation loss %.4f)", epoch, best_loss)
                break
    return best if best is not None else params


_TRAINING_DEFAULTS = {"learning_rate": 1e-3, "beta1": 0.9, "beta2": 0.999, "epsilon": 1e-8,
                      "batch_size": 64, "epochs": 100, "patience": 10, "validation_split": 0.2}


def build_mlp(n_times, n_bands, n_classes, hyper) -> Network:
    layers, n_in = [], n_times * n_bands
    for i, width in enumerate(hyper["hidden"]):
        layers += [Dense(f"dense{i}", n_in, int(width)), ReLU()]
        if hyper["dropout"] > 0:
            layers.append(Dropout(hyper["dropout"]))
        n_in = int(width)
    layers.append(Dense("out", n_in, n_classes))
    return Network(layers, flat_input=True)


def build_tempcnn(n_times, n_bands, n_classes, hyper) -> Network:
    layers, c_in = [], n_bands
    for i in range(int(hyper["conv_layers"])):
        layers += [Conv1D(f"conv{i}", c_in, int(hyper["filters"]), int(hyper["kernel_size"])),
                   ReLU(), Dropout(hyper["dropout"])]
        c_in = int(hyper["filters"])
    layers += [Flatten(), Dense("dense", n_times * c_in, int(hyper["dense"])), ReLU(),
               Dense("out", int(hyper["dense"]), n_classes)]
    return Network(layers, flat_input=False)


class _NetKind(ModelKind):
    builder = None

    def network(self, x_shape, n_classes, hyper) -> Network:
        return type(self).builder(x_shape[1], x_shape[2], n_classes, hyper)

    def fit(self, x, y, n_classes, hyper, seed):
        net = self.network(x.shape, n_classes, hyper)
        params = fit_network(net, x.astype(np.float64), y, hyper, seed)
        return params

    def predict(self, params, x, n_classes, hyper):
        net = self.network(x.shape, n_classes, hyper)
        p64 = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        return net.predict(p64, x)


class MLP(_NetKind):
    name = "mlp"
    defaults = {"hidden": [256, 128], "dropout": 0.0, **_TRAINING_DEFAULTS}
    builder = staticmethod(build_mlp)


class TempCNN(_NetKind):
    name = "tempcnn"
    defaults = {"conv_layers": 3, "filters": 64, "kernel_size": 5, "dropout": 0.2, "dense": 256,
                **_TRAINING_DEFAULTS}
    builder = staticmethod(build_tempcnn)

    def fit(self, x, y, n_classes, hyper, seed):
        if x.shape[1] < int(hyper["kernel_size"]):
            raise TrainingError(f"series length {x.shape[1]} is shorter than kernel_size "
                                f"{hyper['kernel_size']}")
        return super().fit(x, y, n_classes, hyper, seed)


register_model(MLP())
register_model(TempCNN())
