"""Sample quality control with a self-organizing map.

Samples are projected onto a rectangular Kohonen map; each neuron collects the
labels of the samples it wins, and a sample is graded by how well its label
agrees with its neuron's label distribution.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CubeIntegrityError, SampleError, ValidationError
from .samples import TimeSeriesTable

CLEAN, ANALYZE, REMOVE = "clean", "analyze", "remove"
PPM_CELL = 16

# fixed palette, assigned to labels in sorted order
PALETTE = [
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40), (148, 103, 189),
    (140, 86, 75), (227, 119, 194), (127, 127, 127), (188, 189, 34), (23, 190, 207),
    (174, 199, 232), (255, 187, 120), (152, 223, 138), (255, 152, 150), (197, 176, 213),
    (196, 156, 148), (247, 182, 210), (199, 199, 199), (219, 219, 141), (158, 218, 229),
]
EMPTY_COLOR = (255, 255, 255)


@dataclass
class SOMGrid:
    width: int
    height: int
    weights: np.ndarray            # (neurons, features) float32
    label_dist: list[dict[str, float]]
    counts: np.ndarray             # (neurons,) int

    @property
    def n_neurons(self) -> int:
        return self.width * self.height

    def position(self, neuron: int) -> tuple[int, int]:
        return divmod(neuron, self.width)

    def majority(self, neuron: int) -> tuple[str, float]:
        """Most frequent label and its frequency; ties go to the lexicographically smallest."""
        dist = self.label_dist[neuron]
        if not dist:
            return "", 0.0
        top = max(dist.values())
        return min(lab for lab, f in dist.items() if f == top), top


@dataclass(frozen=True)
class SampleEvaluation:
    sample_index: int
    neuron: int
    purity: float
    status: str


def default_grid_side(n_samples: int) -> int:
    return max(1, math.ceil(math.sqrt(5 * math.sqrt(n_samples))))


def _grid_distance(width: int, height: int) -> np.ndarray:
    rows, cols = np.divmod(np.arange(width * height), width)
    return np.maximum(np.abs(rows[:, None] - rows[None, :]),
                      np.abs(cols[:, None] - cols[None, :])).astype(np.float64)


def _bmu(weights: np.ndarray, v: np.ndarray) -> int:
    d = np.sum((weights - v) ** 2, axis=1)
    return int(np.argmin(d))  # first minimum = lowest index


def som_assign(g: SOMGrid, v) -> int:
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size != g.weights.shape[1]:
        raise ValidationError(f"vector has {v.size} features, map expects {g.weights.shape[1]}")
    return _bmu(g.weights.astype(np.float64), v)


def som_assign_many(g: SOMGrid, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != g.weights.shape[1]:
        raise ValidationError(f"expected (n, {g.weights.shape[1]}) vectors, got {x.shape}")
    w = g.weights.astype(np.float64)
    out = np.empty(x.shape[0], dtype=np.int64)
    for i, v in enumerate(x):
        out[i] = _bmu(w, v)
    return out


def quantization_error(weights: np.ndarray, x: np.ndarray) -> float:
    w = np.asarray(weights, dtype=np.float64)
    return float(np.mean([np.sqrt(np.min(np.sum((w - v) ** 2, axis=1))) for v in x]))


def som_train(t: TimeSeriesTable, width: int | None = None, height: int | None = None,
              epochs: int = 50, seed: int = 0, learning_rate: tuple[float, float] = (0.05, 0.01),
              radius: tuple[float, float] | None = None) -> SOMGrid:
    """Online Kohonen training on the flattened (normalized) series of ``t``.

    Learning rate and neighbourhood radius decay linearly over all updates;
    the neighbourhood is Gaussian in Chebyshev grid distance.  Weights start
    at randomly drawn training samples.
    """
    if len(t) == 0:
        raise SampleError("cannot train a SOM on an empty table")
    if epochs < 1:
        raise ValidationError("epochs must be >= 1")
    x = t.features().astype(np.float64)
    n = x.shape[0]
    side = default_grid_side(n)
    width = width or side
    height = height or side
    if width < 1 or height < 1:
        raise ValidationError("SOM width and height must be >= 1")
    n_neurons = width * height
    r0, r1 = radius if radius is not None else (max(width, height) / 2.0, 0.5)
    lr0, lr1 = learning_rate

    rng = np.random.default_rng(seed)
    init = rng.choice(n, size=n_neurons, replace=n < n_neurons)
    w = x[init].copy()
    dist2 = _grid_distance(width, height) ** 2

    total = epochs * n
    step = 0
    for _ in range(epochs):
        for i in rng.permutation(n):
            frac = step / (total - 1) if total > 1 else 1.0
            lr = lr0 + (lr1 - lr0) * frac
            sigma = r0 + (r1 - r0) * frac
            v = x[i]
            b = _bmu(w, v)
            h = np.exp(-dist2[b] / (2.0 * sigma * sigma))
            w += (lr * h)[:, None] * (v - w)
            step += 1

    grid = SOMGrid(width, height, w.astype(np.float32), [{} for _ in range(n_neurons)],
                   np.zeros(n_neurons, dtype=np.int64))
    assigned = som_assign_many(grid, x)
    labels = t.labels
    for k in range(n_neurons):
        members = [labels[i] for i in np.flatnonzero(assigned == k)]
        grid.counts[k] = len(members)
        if members:
            uniq = sorted(set(members))
            grid.label_dist[k] = {lab: members.count(lab) / len(members) for lab in uniq}
    return grid


def som_evaluate(g: SOMGrid, t: TimeSeriesTable, purity_threshold: float = 0.6) -> list[SampleEvaluation]:
    x = t.features()
    if x.shape[1] != g.weights.shape[1]:
        raise ValidationError(f"table has {x.shape[1]} features, map expects {g.weights.shape[1]}")
    out = []
    for i, (neuron, label) in enumerate(zip(som_assign_many(g, x), t.labels)):
        neuron = int(neuron)
        if g.counts[neuron] == 0:
            raise CubeIntegrityError(f"sample {i} maps to neuron {neuron}, which has no samples")
        major, purity = g.majority(neuron)
        if label != major:
            status = REMOVE
        elif purity >= purity_threshold:
            status = CLEAN
        else:
            status = ANALYZE
        out.append(SampleEvaluation(i, neuron, purity, status))
    return out


def _label_colors(g: SOMGrid) -> dict[str, tuple[int, int, int]]:
    labels = sorted({lab for d in g.label_dist for lab in d})
    return {lab: PALETTE[i % len(PALETTE)] for i, lab in enumerate(labels)}


def som_export(g: SOMGrid, directory: str | os.PathLike) -> list[Path]:
    """Write ``som_grid.csv`` and a ``som_map.ppm`` image colored by majority label."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    grid_csv = d / "som_grid.csv"
    with open(grid_csv, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["neuron", "row", "col", "majority_label", "purity", "count"])
        for k in range(g.n_neurons):
            r, c = g.position(k)
            major, purity = g.majority(k)
            w.writerow([k, r, c, major, f"{purity:.6f}", int(g.counts[k])])

    colors = _label_colors(g)
    img = np.empty((g.height * PPM_CELL, g.width * PPM_CELL, 3), dtype=np.uint8)
    for k in range(g.n_neurons):
        r, c = g.position(k)
        major, _ = g.majority(k)
        img[r * PPM_CELL:(r + 1) * PPM_CELL, c * PPM_CELL:(c + 1) * PPM_CELL] = \
            colors.get(major, EMPTY_COLOR)
    ppm = d / "som_map.ppm"
    write_ppm(ppm, img)
    return [grid_csv, ppm]


def write_ppm(path: str | os.PathLike, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def export_evaluation(evals: Sequence[SampleEvaluation], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_index", "neuron", "purity", "status"])
        for e in evals:
            w.writerow([e.sample_index, e.neuron, f"{e.purity:.6f}", e.status])

