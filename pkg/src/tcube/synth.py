"""Deterministic synthetic scenarios for end-to-end runs at desk scale.

A scenario is one tile split into square blocks, each block holding one
class.  Every class has a per-band temporal signature (a seasonal sinusoid
plus a class-specific pulse, so the order of observations matters, not just
their values).  Each regular interval gets one observation on a jittered
date; observations get Gaussian noise, and a fraction of pixels is lost to
clouds (written as nodata, or flagged in a separate mask band).
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .catalog import CollectionDescriptor, parse_catalog
from .cube import build_timeline, write_atomic
from .errors import ValidationError
from .geo import LonLatAffine, TileGrid
from .smooth import LabelMap, write_label_map

SCALE = 1e-4
NODATA = -9999
CLOUD_VALUE = 0.9  # bright cloud reflectance left under the mask when a mask band is used


@dataclass(frozen=True)
class Signature:
    base: float
    amplitude: float
    phase: float
    pulse_height: float = 0.0
    pulse_center: float = 0.5  # fraction of the season
    pulse_width: float = 0.06

    def __call__(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        return (self.base + self.amplitude * np.sin(2 * math.pi * s + self.phase)
                + self.pulse_height * np.exp(-0.5 * ((s - self.pulse_center) / self.pulse_width) ** 2))


def default_signatures(n_classes: int, n_bands: int) -> list[list[Signature]]:
    """Signatures indexed [class][band]."""
    out = []
    for c in range(n_classes):
        row = []
        for b in range(n_bands):
            row.append(Signature(base=0.35 + 0.05 * b, amplitude=0.12 + 0.04 * (c % 2),
                                 phase=2 * math.pi * c / n_classes + 0.3 * b,
                                 pulse_height=0.15, pulse_center=(c + 0.5) / n_classes))
        out.append(row)
    return out


@dataclass(frozen=True)
class ScenarioSpec:
    classes: tuple[str, ...] = ("crop", "forest", "pasture")
    bands: tuple[str, ...] = ("ndvi", "evi")
    nrows: int = 64
    ncols: int = 64
    block: int = 16
    start: str = "2017-09-01"
    end: str = "2018-08-31"
    period_days: int = 16
    cloud_fraction: float = 0.05
    noise: float = 0.12
    pixel_noise: float = 0.0  # persistent per-pixel offset, constant over time
    n_samples: int = 300
    n_reference: int = 300
    cloud_mask_band: bool = False
    tile: str = "T01"
    resolution: float = 30.0
    origin: tuple[float, float] = (500000.0, 8400000.0)
    signatures: tuple = field(default=None)  # [class][band] of Signature kwargs; None = defaults

    def __post_init__(self):
        if len(self.classes) < 2 or len(set(self.classes)) != len(self.classes):
            raise ValidationError("a scenario needs at least two distinct class names")
        if not self.bands:
            raise ValidationError("a scenario needs at least one band")
        if not 0 <= self.cloud_fraction < 1:
            raise ValidationError("cloud_fraction must lie in [0, 1)")
        if self.nrows < 1 or self.ncols < 1 or self.block < 1:
            raise ValidationError("nrows, ncols and block must be positive")
        if self.noise < 0 or self.pixel_noise < 0:
            raise ValidationError("noise levels must be non-negative")

    def signature_table(self) -> list[list[Signature]]:
        if self.signatures is None:
            return default_signatures(len(self.classes), len(self.bands))
        sig = [[s if isinstance(s, Signature) else Signature(**s) for s in row]
               for row in self.signatures]
        if len(sig) != len(self.classes) or any(len(r) != len(self.bands) for r in sig):
            raise ValidationError("signatures must be a [class][band] table")
        return sig

    def to_dict(self) -> dict:
        d = asdict(self)
        d["signatures"] = [[asdict(s) for s in row] for row in self.signature_table()]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValidationError(f"unknown scenario key(s): {', '.join(unknown)}")
        d = dict(d)
        for key in ("classes", "bands", "origin"):
            if key in d:
                d[key] = tuple(d[key])
        if d.get("signatures") is not None:
            d["signatures"] = tuple(tuple(Signature(**s) for s in row) for row in d["signatures"])
        return cls(**d)


@dataclass(frozen=True)
class SynthResult:
    root: str
    catalog_path: str
    collection: CollectionDescriptor
    truth: LabelMap
    samples_path: str
    reference_path: str
    cloud_pixels: int


def check_separation(spec: ScenarioSpec, season: np.ndarray) -> None:
    """Every pair of class mean curves must be more than 3 noise sigmas apart (L2)."""
    sig = spec.signature_table()
    curves = [np.concatenate([s(season) for s in row]) for row in sig]
    sigma = max(spec.noise, 1e-12)
    for i in range(len(curves)):
        for j in range(i + 1, len(curves)):
            d = float(np.linalg.norm(curves[i] - curves[j]))
            if d <= 3 * sigma:
                raise ValidationError(f"signatures of {spec.classes[i]!r} and {spec.classes[j]!r} "
                                      f"are only {d:.4g} apart (need > {3 * sigma:.4g})")


def block_layout(spec: ScenarioSpec, rng: np.random.Generator) -> np.ndarray:
    """Class index per pixel; blocks are dealt classes in a shuffled balanced order."""
    br = math.ceil(spec.nrows / spec.block)
    bc = math.ceil(spec.ncols / spec.block)
    k = len(spec.classes)
    deck = np.resize(np.arange(k), br * bc)
    rng.shuffle(deck)
    blocks = deck.reshape(br, bc)
    return np.kron(blocks, np.ones((spec.block, spec.block), dtype=np.int64))[:spec.nrows, :spec.ncols]


def _affine(spec: ScenarioSpec) -> LonLatAffine:
    # a local equirectangular approximation around (-47, -15) degrees
    x0, y0 = spec.origin
    b, f = 1.0 / 111320.0, 1.0 / 110540.0
    return LonLatAffine((-47.0 - x0 * b, b, 0.0, -15.0 - y0 * f, 0.0, f))


def _pick(rng: np.random.Generator, candidates: np.ndarray, n: int) -> np.ndarray:
    if n > candidates.size:
        raise ValidationError(f"cannot draw {n} distinct pixels from {candidates.size}")
    return np.sort(rng.choice(candidates, size=n, replace=False))


def generate_cube(spec: ScenarioSpec, seed: int, out: str | Path) -> SynthResult:
    """Write catalog, raw rasters, truth map and sample/reference CSVs under ``out``."""
    root = Path(out)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ValidationError(f"cannot create {root}: {e.strerror}") from e
    rng = np.random.default_rng(seed)
    timeline = build_timeline(dt.date.fromisoformat(spec.start), dt.date.fromisoformat(spec.end),
                              spec.period_days)
    span = len(timeline) * spec.period_days
    dates = [t + dt.timedelta(days=int(rng.integers(0, spec.period_days)))
             for t in timeline.instants]
    season = np.array([(d - timeline.start).days / span for d in dates])
    check_separation(spec, season)

    truth = block_layout(spec, rng)
    sig = spec.signature_table()
    offset = rng.normal(0.0, spec.pixel_noise, size=(len(spec.bands), spec.nrows, spec.ncols))
    grid = TileGrid(spec.tile, spec.nrows, spec.ncols, spec.origin,
                    (spec.resolution, spec.resolution))
    raw_dir = root / "raw" / spec.tile
    raw_dir.mkdir(parents=True, exist_ok=True)

    items, cloud_total = [], 0
    for k, date in enumerate(dates):
        cloudy = rng.random((spec.nrows, spec.ncols)) < spec.cloud_fraction
        cloud_total += int(cloudy.sum())
        assets = {}
        for b, band in enumerate(spec.bands):
            means = np.array([sig[c][b](season[k]) for c in range(len(spec.classes))])
            vals = means[truth] + offset[b] + rng.normal(0.0, spec.noise, size=truth.shape)
            stored = np.clip(np.rint(vals / SCALE), -32767, 32767)
            stored[stored == NODATA] = NODATA + 1
            stored[cloudy] = CLOUD_VALUE / SCALE if spec.cloud_mask_band else NODATA
            name = f"{spec.tile}_{band}_{date.isoformat()}.bin"
            write_atomic(raw_dir / name, stored.astype("<i2").tobytes())
            assets[band] = f"raw/{spec.tile}/{name}"
        if spec.cloud_mask_band:
            name = f"{spec.tile}_cloud_{date.isoformat()}.bin"
            write_atomic(raw_dir / name, cloudy.astype("<i2").tobytes())
            assets["cloud"] = f"raw/{spec.tile}/{name}"
        items.append({"tile": spec.tile, "datetime": date.isoformat(),
                      "cloud_cover": round(100.0 * float(cloudy.mean()), 4),
                      "nrows": spec.nrows, "ncols": spec.ncols, "origin": list(spec.origin),
                      "assets": assets})

    bands = [{"name": b, "dtype": "int16", "scale": SCALE, "nodata": NODATA, "cloud_mask": False}
             for b in spec.bands]
    if spec.cloud_mask_band:
        bands.append({"name": "cloud", "dtype": "int16", "scale": 1.0, "nodata": None,
                      "cloud_mask": True})
    affine = _affine(spec)
    doc = {"id": f"synth-{seed}", "crs": "synthetic-metric",
           "resolution": [spec.resolution, spec.resolution], "bands": bands,
           "lonlat_affine": list(affine.coeffs), "items": items}
    catalog_path = root / "catalog.json"
    write_atomic(catalog_path, json.dumps(doc, indent=1).encode())
    write_atomic(root / "scenario.json", json.dumps(spec.to_dict(), indent=1).encode())

    truth_map = write_label_map(root / "truth", spec.classes, [grid], {spec.tile: truth},
                                doc["crs"], affine, ppm=False)

    # training samples, balanced over classes; reference points from the remaining pixels
    flat = truth.ravel()
    k = len(spec.classes)
    train_idx = np.concatenate([
        _pick(rng, np.flatnonzero(flat == c), spec.n_samples // k + (c < spec.n_samples % k))
        for c in range(k)])
    remaining = np.setdiff1d(np.arange(flat.size), train_idx)
    ref_idx = _pick(rng, remaining, min(spec.n_reference, remaining.size))

    def lonlat(i):
        r, c = divmod(int(i), spec.ncols)
        return affine.to_lonlat(*grid.pixel_center(r, c))

    samples_path = root / "samples.csv"
    last = timeline.instants[-1]
    with open(samples_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["longitude", "latitude", "start_date", "end_date", "label"])
        for i in train_idx:
            lon, lat = lonlat(i)
            w.writerow([repr(lon), repr(lat), timeline.start.isoformat(), last.isoformat(),
                        spec.classes[flat[i]]])
    reference_path = root / "reference.csv"
    with open(reference_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["longitude", "latitude", "label"])
        for i in ref_idx:
            lon, lat = lonlat(i)
            w.writerow([repr(lon), repr(lat), spec.classes[flat[i]]])

    return SynthResult(str(root.resolve()), str(catalog_path), parse_catalog(catalog_path),
                       truth_map, str(samples_path), str(reference_path), cloud_total)


def interior_mask(truth: np.ndarray, margin: int) -> np.ndarray:
    """Pixels whose (2*margin+1) square neighbourhood lies in a single class region."""
    h, w = truth.shape
    ok = np.ones_like(truth, dtype=bool)
    p = np.pad(truth, margin, mode="edge")
    for dy in range(2 * margin + 1):
        for dx in range(2 * margin + 1):
            ok &= p[dy:dy + h, dx:dx + w] == truth
    return ok


def load_spec(path: str | Path | None, overrides: dict | None = None) -> ScenarioSpec:
    d = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ValidationError(f"cannot read scenario {path}: {e}") from e
    d.update(overrides or {})
    return ScenarioSpec.from_dict(d)
