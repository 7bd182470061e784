"""Cross-validation and area-weighted accuracy assessment."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import OutsideExtentError, SampleError, ValidationError
from .geo import lonlat_to_pixel
from .models import predict_probs, train
from .samples import TimeSeriesTable
from .smooth import LabelMap

Z95 = 1.96


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts indexed [map class][reference class]."""

    labels: tuple[str, ...]
    counts: np.ndarray
    dropped: int = 0

    def __post_init__(self):
        c = np.asarray(self.counts)
        k = len(self.labels)
        if c.shape != (k, k):
            raise ValidationError(f"confusion counts must be {k}x{k}, got {c.shape}")
        if np.any(c < 0):
            raise ValidationError("confusion counts must be non-negative")
        if c.sum() == 0:
            raise ValidationError("confusion matrix is empty")

    @property
    def total(self) -> int:
        return int(np.asarray(self.counts).sum())

    def accuracy(self) -> float:
        c = np.asarray(self.counts)
        return float(np.trace(c) / c.sum())

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "counts": np.asarray(self.counts).tolist(),
                "dropped": self.dropped}


# -- k-fold ----------------------------------------------------------------------

@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignment: np.ndarray  # sample index -> fold

    def fold(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        test = np.flatnonzero(self.assignment == i)
        return np.flatnonzero(self.assignment != i), test


def stratified_folds(labels: Sequence[str], k: int, seed: int = 0) -> FoldPlan:
    """Per-label shuffled round-robin fold assignment.

    Each label's samples are dealt into folds starting at a rotating offset,
    so per-label fold sizes differ by at most one and so do overall sizes.
    """
    if k < 2:
        raise ValidationError(f"k must be >= 2, got {k}")
    labels = list(labels)
    uniq = sorted(set(labels))
    small = [lab for lab in uniq if labels.count(lab) < k]
    if small:
        raise SampleError(f"stratification impossible: labels with fewer than k={k} samples: {small}")
    rng = np.random.default_rng(seed)
    assign = np.empty(len(labels), dtype=np.int64)
    offset = 0
    arr = np.array(labels, dtype=object)
    for lab in uniq:
        idx = rng.permutation(np.flatnonzero(arr == lab))
        assign[idx] = (np.arange(idx.size) + offset) % k
        offset = (offset + idx.size) % k
    return FoldPlan(k, assign)


@dataclass(frozen=True)
class KFoldResult:
    fold_accuracy: list[float]
    mean_accuracy: float
    confusion: ConfusionMatrix
    predictions: list[str] = field(repr=False)
    note: str = ("cross-validation compares models on training samples; "
                 "it is not an accuracy estimate for the map")

    def to_dict(self) -> dict:
        return {"fold_accuracy": self.fold_accuracy, "mean_accuracy": self.mean_accuracy,
                "confusion": self.confusion.to_dict(), "note": self.note}


def kfold_validate(t: TimeSeriesTable, k: int = 5, kind: str = "rf", hyper: Mapping | None = None,
                   seed: int = 0) -> KFoldResult:
    plan = stratified_folds(t.labels, k, seed)
    labels = sorted(set(t.labels))
    index = {lab: i for i, lab in enumerate(labels)}
    counts = np.zeros((len(labels), len(labels)), dtype=np.int64)
    predicted: list[str | None] = [None] * len(t)
    accs = []
    for i in range(k):
        tr, te = plan.fold(i)
        model = train(t.subset(tr), kind, hyper, seed + i)
        p = predict_probs(model, t.subset(te).features())
        pred = [model.labels[j] for j in np.argmax(p, axis=1)]
        ref = [t.labels[j] for j in te]
        for j, a, b in zip(te, pred, ref):
            predicted[j] = a
            counts[index[a], index[b]] += 1
        accs.append(float(np.mean([a == b for a, b in zip(pred, ref)])))
    return KFoldResult(accs, float(np.mean(accs)), ConfusionMatrix(tuple(labels), counts),
                       predicted)


# -- map assessment --------------------------------------------------------------

def load_references(path: str | os.PathLike) -> list[tuple[float, float, str]]:
    """Read a ``longitude,latitude,label`` CSV."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"longitude", "latitude", "label"} - set(reader.fieldnames or ())
        if missing:
            raise SampleError(f"{path}: missing column(s) {sorted(missing)}")
        for line, row in enumerate(reader, start=2):
            try:
                lon, lat = float(row["longitude"]), float(row["latitude"])
            except (TypeError, ValueError):
                raise SampleError(f"{path}:{line}: bad coordinate") from None
            if not math.isfinite(lon) or not math.isfinite(lat):
                raise SampleError(f"{path}:{line}: non-finite coordinate")
            if not row["label"]:
                raise SampleError(f"{path}:{line}: empty label")
            out.append((lon, lat, row["label"]))
    return out


def _lookup(m: LabelMap, lon: float, lat: float):
    for g in m.tiles:
        try:
            return g.tile, lonlat_to_pixel(g, m.lonlat_affine, lon, lat)
        except OutsideExtentError:
            continue
    return None


def confusion(m: LabelMap, refs: Sequence[tuple[float, float, str]]) -> ConfusionMatrix:
    unknown = sorted({lab for _, _, lab in refs} - set(m.legend))
    if unknown:
        raise ValidationError(f"reference labels not in map legend: {unknown}")
    index = {lab: i for i, lab in enumerate(m.legend)}
    counts = np.zeros((len(m.legend), len(m.legend)), dtype=np.int64)
    rasters: dict[str, np.ndarray] = {}
    dropped = 0
    for lon, lat, lab in refs:
        hit = _lookup(m, lon, lat)
        if hit is None:
            dropped += 1
            continue
        tile, (r, c) = hit
        if tile not in rasters:
            rasters[tile] = m.read(tile)
        counts[rasters[tile][r, c], index[lab]] += 1
    if counts.sum() == 0:
        raise OutsideExtentError(f"all {len(refs)} reference points fall outside the map")
    return ConfusionMatrix(m.legend, counts, dropped)


@dataclass(frozen=True)
class AreaEstimate:
    labels: tuple[str, ...]
    mapped_area: np.ndarray
    p_hat: np.ndarray
    overall_accuracy: float
    overall_accuracy_var: float
    users_accuracy: list
    producers_accuracy: list  # None where undefined
    adjusted_area: np.ndarray
    ci95_area: np.ndarray

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "mapped_area": self.mapped_area.tolist(),
                "p_hat": self.p_hat.tolist(), "overall_accuracy": self.overall_accuracy,
                "overall_accuracy_var": self.overall_accuracy_var,
                "users_accuracy": self.users_accuracy,
                "producers_accuracy": self.producers_accuracy,
                "adjusted_area": self.adjusted_area.tolist(), "ci95_area": self.ci95_area.tolist()}

    def table(self) -> str:
        w = max(8, *(len(lab) for lab in self.labels))

        def fmt(v):
            return "   n/a" if v is None else f"{v:6.3f}"

        lines = [f"{'Labels':<{w}}  Producer's Accuracy  User's Accuracy"]
        for lab, pa, ua in zip(self.labels, self.producers_accuracy, self.users_accuracy):
            lines.append(f"{lab:<{w}}  {fmt(pa):>19}  {fmt(ua):>15}")
        lines.append(f"Overall accuracy: {self.overall_accuracy:.3f}")
        return "\n".join(lines)


def accuracy_area(cm: ConfusionMatrix, mapped_area: Sequence[float]) -> AreaEstimate:
    """Stratified estimator of accuracy and error-adjusted class areas."""
    n = np.asarray(cm.counts, dtype=np.float64)
    a = np.asarray(mapped_area, dtype=np.float64)
    k = len(cm.labels)
    if a.shape != (k,):
        raise ValidationError(f"need {k} mapped areas, got {a.shape}")
    if np.any(a < 0) or not np.all(np.isfinite(a)) or a.sum() <= 0:
        raise ValidationError("mapped areas must be finite, non-negative and not all zero")
    rows = n.sum(axis=1)
    bad = [cm.labels[i] for i in range(k) if rows[i] > 0 and a[i] == 0]
    if bad:
        raise ValidationError(f"classes with reference samples but zero mapped area: {bad}")
    unsampled = [cm.labels[i] for i in range(k) if rows[i] == 0 and a[i] > 0]
    if unsampled:
        raise ValidationError(f"mapped classes without reference samples: {unsampled}")
    thin = [cm.labels[i] for i in range(k) if 0 < rows[i] < 2]
    if thin:
        raise ValidationError(f"classes with fewer than 2 reference samples: {thin}")

    total = a.sum()
    w = a / total
    safe_rows = np.where(rows > 0, rows, 1.0)
    frac = n / safe_rows[:, None]
    p = w[:, None] * frac
    diag = np.diag(p)
    row_p = p.sum(axis=1)
    col_p = p.sum(axis=0)
    oa = float(diag.sum())
    ua = [float(diag[i] / row_p[i]) if row_p[i] > 0 else None for i in range(k)]
    pa = [float(diag[j] / col_p[j]) if col_p[j] > 0 else None for j in range(k)]
    dof = np.where(rows > 1, rows - 1, 1.0)
    se = np.sqrt(np.sum((w[:, None] ** 2) * frac * (1.0 - frac) / dof[:, None], axis=0))
    uaa = np.array([u if u is not None else 0.0 for u in ua])
    oa_var = float(np.sum(w ** 2 * uaa * (1.0 - uaa) / dof))
    return AreaEstimate(cm.labels, a, p, oa, oa_var, ua, pa, col_p * total, Z95 * se * total)


def map_areas(m: LabelMap) -> np.ndarray:
    """Mapped area per class in squared CRS units."""
    return m.class_counts().astype(np.float64) * m.pixel_area
