"""Uniform train/predict contract shared by every classifier.

A model kind supplies ``fit`` (normalized series and integer labels in, a
dict of named parameter arrays out) and ``predict`` (parameters and
normalized series in, class probabilities out).  Normalization, label
bookkeeping, validation and the on-disk format are handled here, so a new
kind plugs into training, classification and the CLI by registering itself.
"""

from __future__ import annotations

import json
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from ..errors import ModelFormatError, ModelVersionError, ValidationError
from ..samples import NormStats, TimeSeriesTable, fit_normalization, normalize_array

MAGIC = b"TCUBEMDL"
MODEL_FORMAT_VERSION = 1
SIMPLEX_TOL = 1e-6


class ModelKind:
    """Base class for pluggable classifiers."""

    name: str = ""
    defaults: Mapping[str, Any] = {}

    def fit(self, x: np.ndarray, y: np.ndarray, n_classes: int, hyper: dict,
            seed: int) -> dict[str, np.ndarray]:
        """Train on ``x`` of shape (n, times, bands) in [0, 1]; ``y`` holds class indices."""
        raise NotImplementedError

    def predict(self, params: Mapping[str, np.ndarray], x: np.ndarray, n_classes: int,
                hyper: dict) -> np.ndarray:
        """Probabilities of shape (n, n_classes) for ``x`` of shape (n, times, bands)."""
        raise NotImplementedError


_REGISTRY: dict[str, ModelKind] = {}


def register_model(kind: ModelKind) -> ModelKind:
    if not kind.name:
        raise ValueError("model kind needs a name")
    _REGISTRY[kind.name] = kind
    return kind


def get_kind(name: str) -> ModelKind:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise ValidationError(f"unknown model kind {name!r}; known: {sorted(_REGISTRY)}") from None


def model_kinds() -> list[str]:
    return sorted(_REGISTRY)


def resolve_hyper(kind: ModelKind, hyper: Mapping[str, Any] | None) -> dict:
    hyper = dict(hyper or {})
    unknown = sorted(set(hyper) - set(kind.defaults))
    if unknown:
        raise ValidationError(f"unknown hyperparameter(s) for {kind.name}: {', '.join(unknown)}")
    out = dict(kind.defaults)
    out.update(hyper)
    return out


@dataclass(frozen=True)
class TrainedModel:
    kind: str
    labels: tuple[str, ...]
    norm: NormStats
    layout: tuple[int, int]
    hyper: dict = field(compare=False)
    params: dict = field(compare=False, repr=False)

    @property
    def n_features(self) -> int:
        return self.layout[0] * self.layout[1]


def train(t: TimeSeriesTable, kind: str, hyper: Mapping[str, Any] | None = None,
          seed: int = 0) -> TrainedModel:
    k = get_kind(kind)
    h = resolve_hyper(k, hyper)
    labels = sorted(set(t.labels))
    if len(labels) < 2:
        raise ValidationError(f"need at least 2 labels to train, got {labels}")
    counts = {lab: t.labels.count(lab) for lab in labels}
    thin = [lab for lab, n in counts.items() if n < 2]
    if thin:
        raise ValidationError(f"labels with fewer than 2 samples: {thin}")
    norm = fit_normalization(t)
    x = normalize_array(t.series, norm, t.band_names)
    index = {lab: i for i, lab in enumerate(labels)}
    y = np.array([index[lab] for lab in t.labels], dtype=np.int64)
    params = k.fit(x, y, len(labels), h, seed)
    params = {name: np.ascontiguousarray(v, dtype="<f4") for name, v in params.items()}
    return TrainedModel(kind, tuple(labels), norm, t.layout, h, params)


def predict_probs(m: TrainedModel, batch: np.ndarray) -> np.ndarray:
    """Class probabilities for raw (un-normalized) rows laid out time-major."""
    batch = np.asarray(batch)
    if batch.ndim != 2 or batch.shape[1] != m.n_features:
        raise ValidationError(f"batch has shape {batch.shape}, model expects (n, {m.n_features})")
    k = len(m.labels)
    if batch.shape[0] == 0:
        return np.zeros((0, k))
    with warnings.catch_warnings():
        # constant bands were already reported when the model was trained
        warnings.simplefilter("ignore", RuntimeWarning)
        x = normalize_array(batch.reshape(-1, *m.layout), m.norm)
    p = np.asarray(get_kind(m.kind).predict(m.params, x, k, m.hyper), dtype=np.float64)
    if p.shape != (batch.shape[0], k):
        raise ValidationError(f"{m.kind} returned shape {p.shape}, expected {(batch.shape[0], k)}")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > SIMPLEX_TOL):
        raise ValidationError(f"{m.kind} returned rows outside the probability simplex")
    return p


def _header(m: TrainedModel) -> dict:
    return {"kind": m.kind, "labels": list(m.labels), "layout": list(m.layout),
            "hyperparams": m.hyper, "norm": m.norm.to_dict(),
            "params": [{"name": n, "shape": list(a.shape), "nbytes": int(a.nbytes)}
                       for n, a in m.params.items()]}


def model_bytes(m: TrainedModel) -> bytes:
    header = json.dumps(_header(m), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", MODEL_FORMAT_VERSION, len(header)), header]
    parts += [np.ascontiguousarray(a, dtype="<f4").tobytes() for a in m.params.values()]
    return b"".join(parts)


def save_model(m: TrainedModel, path: str | os.PathLike) -> None:
    from ..cube import write_atomic
    write_atomic(path, model_bytes(m))


def model_from_bytes(raw: bytes, source: str = "<bytes>") -> TrainedModel:
    if raw[:8] != MAGIC:
        raise ModelFormatError(f"{source}: not a model file (bad magic)")
    if len(raw) < 16:
        raise ModelFormatError(f"{source}: truncated header")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version > MODEL_FORMAT_VERSION:
        raise ModelVersionError(f"{source}: model format version {version} is newer than "
                                f"supported version {MODEL_FORMAT_VERSION}")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelFormatError(f"{source}: corrupt header ({e})") from e
    offset = 16 + hlen
    expected = offset + sum(p["nbytes"] for p in header["params"])
    if len(raw) != expected:
        raise ModelFormatError(f"{source}: {len(raw)} bytes, expected {expected} (truncated?)")
    params = {}
    for p in header["params"]:
        arr = np.frombuffer(raw, dtype="<f4", count=p["nbytes"] // 4, offset=offset)
        params[p["name"]] = arr.reshape(p["shape"]).copy()
        offset += p["nbytes"]
    get_kind(header["kind"])
    return TrainedModel(header["kind"], tuple(header["labels"]), NormStats.from_dict(header["norm"]),
                        tuple(header["layout"]), header["hyperparams"], params)


def load_model(path: str | os.PathLike) -> TrainedModel:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise ModelFormatError(f"cannot read model {path}: {e.strerror}") from e
    return model_from_bytes(raw, str(path))
