"""Labelled sample points and the time-series table extracted from a cube."""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
import os
import re
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .cube import RegularCube, Timeline, locate, sample_pixels
from .errors import OutsideExtentError, SampleError

SAMPLE_COLUMNS = ("longitude", "latitude", "start_date", "end_date", "label")
_DATE_RE = re.compile(r"^\d{4}-\d{2}-\d{2}$")


@dataclass(frozen=True)
class SamplePoint:
    longitude: float
    latitude: float
    start_date: dt.date
    end_date: dt.date
    label: str

    def __post_init__(self):
        if self.start_date > self.end_date:
            raise SampleError(f"start_date {self.start_date} is after end_date {self.end_date}")
        if not self.label:
            raise SampleError("label must be non-empty")


def _strict_date(value: str, line: int, col: str) -> dt.date:
    value = (value or "").strip()
    if not _DATE_RE.match(value):
        raise SampleError(f"line {line}: {col} {value!r} is not YYYY-MM-DD")
    try:
        return dt.date.fromisoformat(value)
    except ValueError:
        raise SampleError(f"line {line}: {col} {value!r} is not a valid date") from None


def _point_from_fields(row: dict, line: int) -> SamplePoint:
    try:
        lon = float(row["longitude"])
        lat = float(row["latitude"])
    except (TypeError, ValueError):
        raise SampleError(f"line {line}: longitude/latitude must be numbers") from None
    start = _strict_date(row["start_date"], line, "start_date")
    end = _strict_date(row["end_date"], line, "end_date")
    label = (row["label"] or "").strip()
    if not label:
        raise SampleError(f"line {line}: empty label")
    if start > end:
        raise SampleError(f"line {line}: start_date {start} is after end_date {end}")
    return SamplePoint(lon, lat, start, end, label)


def load_samples_csv(path: str | os.PathLike) -> list[SamplePoint]:
    """Read ``longitude,latitude,start_date,end_date,label`` rows; columns matched by name."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SampleError(f"{path}: empty file")
        missing = [c for c in SAMPLE_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise SampleError(f"{path}: missing column(s) {', '.join(missing)}")
        points = [_point_from_fields(row, reader.line_num) for row in reader]
    if not points:
        raise SampleError(f"{path}: no sample rows")
    return points


def load_samples_geojson(path: str | os.PathLike) -> list[SamplePoint]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("type") != "FeatureCollection":
        raise SampleError(f"{path}: expected a GeoJSON FeatureCollection")
    points = []
    for i, feat in enumerate(doc.get("features", [])):
        geom = feat.get("geometry") or {}
        if geom.get("type") != "Point":
            raise SampleError(f"{path}: feature {i} is not a Point")
        props = dict(feat.get("properties") or {})
        props["longitude"], props["latitude"] = geom["coordinates"][:2]
        for c in ("start_date", "end_date", "label"):
            if c not in props:
                raise SampleError(f"{path}: feature {i} lacks property {c!r}")
        points.append(_point_from_fields(props, i))
    if not points:
        raise SampleError(f"{path}: no features")
    return points


def load_samples(path: str | os.PathLike) -> list[SamplePoint]:
    if str(path).lower().endswith((".geojson", ".json")):
        return load_samples_geojson(path)
    return load_samples_csv(path)


@dataclass
class TimeSeriesTable:
    """Sample metadata plus one [time][band] series per sample."""

    cube_id: str
    band_names: list[str]
    timeline: Timeline
    points: list[SamplePoint]
    series: np.ndarray  # (n, n_times, n_bands) float32
    n_outside: int = 0
    n_rejected: int = 0
    normalized: bool = field(default=False)

    def __post_init__(self):
        self.series = np.asarray(self.series, dtype=np.float32)
        n, t, b = self.series.shape
        if n != len(self.points):
            raise SampleError(f"{n} series for {len(self.points)} points")
        if t != len(self.timeline) or b != len(self.band_names):
            raise SampleError(f"series shape {self.series.shape[1:]} does not match "
                              f"timeline/bands ({len(self.timeline)}, {len(self.band_names)})")
        if not np.all(np.isfinite(self.series)):
            raise SampleError("time series contain missing values")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def dropped(self) -> int:
        return self.n_outside + self.n_rejected

    @property
    def layout(self) -> tuple[int, int]:
        return self.series.shape[1], self.series.shape[2]

    @property
    def labels(self) -> list[str]:
        return [p.label for p in self.points]

    def features(self) -> np.ndarray:
        """Flattened time-major features: column ``t * n_bands + b``."""
        return self.series.reshape(len(self.points), -1)

    def subset(self, idx) -> "TimeSeriesTable":
        idx = np.asarray(idx, dtype=int)
        return replace(self, points=[self.points[i] for i in idx], series=self.series[idx],
                       n_outside=0, n_rejected=0)


def _covers(p: SamplePoint, timeline: Timeline) -> bool:
    first, last = timeline.instants[0], timeline.instants[-1]
    return p.start_date < first + dt.timedelta(days=timeline.period_days) and p.end_date >= last


def get_data(cube: RegularCube, points: Sequence[SamplePoint], workers: int = 1) -> TimeSeriesTable:
    """Extract the nearest-pixel series of every point over the full cube timeline.

    Points outside all tiles are dropped; points whose validity interval does
    not reach both the first and the last cube interval are rejected.
    """
    if not points:
        raise SampleError("no sample points given")
    timeline = cube.timeline
    kept, outside, rejected = [], 0, 0
    for p in points:
        try:
            loc = locate(cube, p.longitude, p.latitude)
        except OutsideExtentError:
            outside += 1
            continue
        if not _covers(p, timeline):
            rejected += 1
            continue
        kept.append((p, loc))
    if not kept:
        raise SampleError(f"no sample retained ({outside} outside the cube, "
                          f"{rejected} not covering its timeline)")

    by_tile: dict[str, list[int]] = {}
    for i, (_, (tile, _, _)) in enumerate(kept):
        by_tile.setdefault(tile, []).append(i)

    def extract(tile):
        idx = by_tile[tile]
        return idx, sample_pixels(cube, tile, [kept[i][1][1] for i in idx],
                                  [kept[i][1][2] for i in idx])

    series = np.empty((len(kept), len(timeline), len(cube.bands)), dtype=np.float32)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(extract, by_tile))
    else:
        parts = [extract(t) for t in by_tile]
    # assembled in input order whatever the completion order
    for idx, vals in parts:
        series[idx] = vals
    return TimeSeriesTable(cube.id, cube.band_names, timeline, [k[0] for k in kept],
                           series, n_outside=outside, n_rejected=rejected)


# -- table persistence -------------------------------------------------------

def _meta_path(path: str | os.PathLike) -> Path:
    return Path(str(path) + ".json")


def save_table(t: TimeSeriesTable, path: str | os.PathLike) -> None:
    """Wide CSV (metadata columns, then ``b{band}_t{index}``) plus a ``.json`` sidecar."""
    cols = [f"b{b}_t{k}" for b in t.band_names for k in range(len(t.timeline))]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(SAMPLE_COLUMNS) + ["cube"] + cols)
        for p, s in zip(t.points, t.series):
            vals = [repr(float(v)) for v in s.T.reshape(-1)]
            w.writerow([repr(p.longitude), repr(p.latitude), p.start_date.isoformat(),
                        p.end_date.isoformat(), p.label, t.cube_id] + vals)
    meta = {"cube_id": t.cube_id, "bands": t.band_names, "timeline": t.timeline.to_dict(),
            "normalized": t.normalized, "n_outside": t.n_outside, "n_rejected": t.n_rejected}
    _meta_path(path).write_text(json.dumps(meta, indent=1), encoding="utf-8")


def load_table(path: str | os.PathLike) -> TimeSeriesTable:
    meta_file = _meta_path(path)
    if not meta_file.exists():
        raise SampleError(f"{path}: missing table sidecar {meta_file.name}")
    meta = json.loads(meta_file.read_text(encoding="utf-8"))
    timeline = Timeline.from_dict(meta["timeline"])
    bands = list(meta["bands"])
    n_t = len(timeline)
    points, rows = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = [f"b{b}_t{k}" for b in bands for k in range(n_t)]
        missing = [c for c in list(SAMPLE_COLUMNS) + cols if c not in (reader.fieldnames or [])]
        if missing:
            raise SampleError(f"{path}: missing column(s) {', '.join(missing[:5])}")
        for row in reader:
            points.append(_point_from_fields(row, reader.line_num))
            vals = np.array([float(row[c]) for c in cols], dtype=np.float32)
            rows.append(vals.reshape(len(bands), n_t).T)
    if not points:
        raise SampleError(f"{path}: empty table")
    return TimeSeriesTable(meta["cube_id"], bands, timeline, points, np.stack(rows),
                           n_outside=meta.get("n_outside", 0), n_rejected=meta.get("n_rejected", 0),
                           normalized=meta.get("normalized", False))


# -- normalization -----------------------------------------------------------

@dataclass(frozen=True)
class NormStats:
    q02: tuple[float, ...]
    q98: tuple[float, ...]

    def to_dict(self) -> dict:
        return {"q02": list(self.q02), "q98": list(self.q98)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(tuple(float(v) for v in d["q02"]), tuple(float(v) for v in d["q98"]))


def sample_quantile(values: np.ndarray, q: float) -> float:
    """Element ``ceil(q * (n - 1))`` of the sorted values."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    k = math.ceil(round(q * (v.size - 1), 9))
    return float(v[k])


def fit_normalization(t: TimeSeriesTable) -> NormStats:
    if len(t) == 0:
        raise SampleError("cannot fit normalization on an empty table")
    q02, q98 = [], []
    for b in range(t.series.shape[2]):
        vals = t.series[:, :, b]
        q02.append(sample_quantile(vals, 0.02))
        q98.append(sample_quantile(vals, 0.98))
    return NormStats(tuple(q02), tuple(q98))


def normalize_array(series: np.ndarray, s: NormStats, names: Sequence[str] | None = None) -> np.ndarray:
    """Map (..., band) values to [0, 1]; constant bands map to 0.5."""
    x = np.asarray(series, dtype=np.float64)
    out = np.empty(x.shape, dtype=np.float32)
    for b, (lo, hi) in enumerate(zip(s.q02, s.q98)):
        if hi == lo:
            name = names[b] if names else b
            warnings.warn(f"band {name} is constant ({lo}); mapped to 0.5", RuntimeWarning,
                          stacklevel=2)
            out[..., b] = 0.5
        else:
            out[..., b] = np.clip((x[..., b] - lo) / (hi - lo), 0.0, 1.0)
    return out


def apply_normalization(t: TimeSeriesTable, s: NormStats) -> TimeSeriesTable:
    if len(s.q02) != len(t.band_names):
        raise SampleError(f"normalization has {len(s.q02)} bands, table has {len(t.band_names)}")
    return replace(t, series=normalize_array(t.series, s, t.band_names), normalized=True)
