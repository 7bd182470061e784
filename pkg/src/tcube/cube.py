"""Regular data cubes built from irregular image collections.

A regular cube has one timeline shared by all tiles, one raster per
(tile, band, instant) and no missing values.  Rasters are headerless
little-endian row-major files stored under ``{root}/{tile}/``; ``cube.json``
holds the geometry and timeline.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .catalog import BandDef, CollectionDescriptor, fetch_bytes, _is_url
from .errors import CatalogError, CubeIntegrityError, OutsideExtentError, ValidationError
from .geo import LonLatAffine, TileGrid, lonlat_to_pixel

log = logging.getLogger(__name__)

CUBE_FORMAT_VERSION = 1
MANIFEST = "cube.json"
_NP_DTYPES = {"int16": np.dtype("<i2"), "float32": np.dtype("<f4")}


@dataclass(frozen=True)
class Timeline:
    instants: tuple[dt.date, ...]
    period_days: int

    def __post_init__(self):
        if self.period_days < 1:
            raise ValidationError("period_days must be >= 1")
        step = dt.timedelta(days=self.period_days)
        for a, b in zip(self.instants, self.instants[1:]):
            if b - a != step:
                raise ValidationError(f"timeline instants {a} and {b} do not meet")

    def __len__(self) -> int:
        return len(self.instants)

    @property
    def start(self) -> dt.date:
        return self.instants[0]

    def interval_index(self, d: dt.date) -> int | None:
        """Index of the half-open interval [t, t+P) that contains ``d``."""
        offset = (d - self.start).days
        if offset < 0:
            return None
        idx = offset // self.period_days
        return idx if idx < len(self.instants) else None

    def to_dict(self) -> dict:
        return {"start": self.start.isoformat(), "period_days": self.period_days,
                "n": len(self.instants)}

    @classmethod
    def from_dict(cls, d: dict) -> "Timeline":
        start = dt.date.fromisoformat(d["start"])
        p = int(d["period_days"])
        return cls(tuple(start + dt.timedelta(days=i * p) for i in range(int(d["n"]))), p)


def build_timeline(start: dt.date, end: dt.date, period_days: int) -> Timeline:
    if start > end:
        raise ValidationError(f"start {start} is after end {end}")
    if period_days < 1:
        raise ValidationError("period_days must be >= 1")
    instants = []
    t = start
    while t <= end:
        instants.append(t)
        t += dt.timedelta(days=period_days)
    return Timeline(tuple(instants), period_days)


@dataclass(frozen=True)
class RegularCube:
    id: str
    crs: str
    tiles: tuple[TileGrid, ...]
    bands: tuple[BandDef, ...]
    timeline: Timeline
    storage_root: str
    lonlat_affine: LonLatAffine = LonLatAffine()
    filled_pixel_count: int = 0
    filled_by_tile: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def band_names(self) -> list[str]:
        return [b.name for b in self.bands]

    def grid(self, tile: str) -> TileGrid:
        for g in self.tiles:
            if g.tile == tile:
                return g
        raise ValidationError(f"cube {self.id!r} has no tile {tile!r}")

    def raster_path(self, tile: str, band: str, instant: dt.date) -> Path:
        return Path(self.storage_root) / tile / f"{tile}_{band}_{instant.isoformat()}.bin"

    def manifest_path(self) -> Path:
        return Path(self.storage_root) / MANIFEST

    def manifest_hash(self) -> str:
        return hashlib.sha256(self.manifest_path().read_bytes()).hexdigest()

    def to_manifest(self) -> dict:
        return {"format_version": CUBE_FORMAT_VERSION, "id": self.id, "crs": self.crs,
                "bands": [b.to_dict() for b in self.bands],
                "timeline": self.timeline.to_dict(),
                "tiles": [g.to_dict() for g in self.tiles],
                "lonlat_affine": list(self.lonlat_affine.coeffs),
                "filled_pixel_count": self.filled_pixel_count,
                "filled_by_tile": dict(self.filled_by_tile)}


def load_cube(root: str | os.PathLike) -> RegularCube:
    path = Path(root) / MANIFEST
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ValidationError(f"{path}: no cube manifest") from e
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: malformed manifest ({e})") from e
    if doc.get("format_version", 1) > CUBE_FORMAT_VERSION:
        raise ValidationError(f"{path}: cube format {doc['format_version']} is newer than supported")
    return RegularCube(
        id=doc["id"], crs=doc["crs"],
        tiles=tuple(TileGrid.from_dict(t) for t in doc["tiles"]),
        bands=tuple(BandDef.from_dict(b) for b in doc["bands"]),
        timeline=Timeline.from_dict(doc["timeline"]),
        storage_root=str(Path(root).resolve()),
        lonlat_affine=LonLatAffine(tuple(doc.get("lonlat_affine", (0, 1, 0, 0, 0, 1)))),
        filled_pixel_count=int(doc.get("filled_pixel_count", 0)),
        filled_by_tile=doc.get("filled_by_tile", {}))


def write_atomic(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def read_raster(source: str, dtype: str, nrows: int, ncols: int) -> np.ndarray:
    npdt = _NP_DTYPES[dtype]
    expected = nrows * ncols * npdt.itemsize
    if _is_url(source):
        raw = fetch_bytes(source)
    else:
        try:
            raw = Path(source).read_bytes()
        except OSError as e:
            raise CatalogError(f"cannot read raster {source}: {e.strerror}") from e
    if len(raw) != expected:
        raise CatalogError(f"raster {source} has {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype=npdt).reshape(nrows, ncols)


def _invalid_mask(values: np.ndarray, nodata: float | None) -> np.ndarray:
    if nodata is None:
        return np.isnan(values) if values.dtype.kind == "f" else np.zeros(values.shape, bool)
    if np.isnan(nodata):
        return np.isnan(values)
    return (values == nodata) | (np.isnan(values) if values.dtype.kind == "f" else False)


def fill_gaps(series: np.ndarray) -> np.ndarray:
    """Fill NaN along axis 0 by linear interpolation; edges take the nearest valid value.

    Columns without any valid value stay NaN.
    """
    n = series.shape[0]
    valid = ~np.isnan(series)
    idx = np.arange(n).reshape((n,) + (1,) * (series.ndim - 1))
    prev = np.maximum.accumulate(np.where(valid, idx, -1), axis=0)
    nxt = np.flip(np.minimum.accumulate(np.flip(np.where(valid, idx, n), axis=0), axis=0), axis=0)
    has_prev = prev >= 0
    has_next = nxt < n
    vp = np.take_along_axis(series, np.clip(prev, 0, n - 1), axis=0)
    vn = np.take_along_axis(series, np.clip(nxt, 0, n - 1), axis=0)
    span = np.where(has_prev & has_next & (nxt > prev), nxt - prev, 1)
    frac = (idx - prev) / span
    interp = vp + (vn - vp) * frac
    out = np.where(valid, series,
                   np.where(has_prev & has_next, interp,
                            np.where(has_prev, vp, np.where(has_next, vn, np.nan))))
    return out


def _composite_band(c: CollectionDescriptor, tile: str, grid: TileGrid, band: BandDef,
                    timeline: Timeline) -> tuple[np.ndarray, int]:
    """Median composite + temporal gap fill for one (tile, band); values in stored units."""
    cloud = c.cloud_band
    buckets: list[list[np.ndarray]] = [[] for _ in timeline.instants]
    for it in c.tile_items(tile):
        if band.name not in it.assets:
            continue
        k = timeline.interval_index(it.datetime)
        if k is None:
            continue
        raw = read_raster(it.assets[band.name], band.dtype, grid.nrows, grid.ncols)
        vals = raw.astype(np.float64)
        bad = _invalid_mask(raw, band.nodata)
        if cloud is not None and cloud.name in it.assets:
            mask = read_raster(it.assets[cloud.name], cloud.dtype, grid.nrows, grid.ncols)
            bad |= (mask != 0) & ~_invalid_mask(mask, cloud.nodata)
        vals[bad] = np.nan
        buckets[k].append(vals)

    comp = np.full((len(timeline), grid.nrows, grid.ncols), np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for k, obs in enumerate(buckets):
            if len(obs) == 1:
                comp[k] = obs[0]
            elif obs:
                comp[k] = np.nanmedian(np.stack(obs), axis=0)
        filled = fill_gaps(comp)
        empty = np.isnan(filled[0])
        n_empty = int(empty.sum())
        if n_empty:
            if n_empty == empty.size:
                raise ValidationError(f"tile {tile}, band {band.name}: no valid observation "
                                      f"in any interval of the timeline")
            fallback = float(np.nanmedian(comp))
            filled[:, empty] = fallback
            log.warning("tile %s band %s: %d all-cloud pixels filled with tile median %.4g",
                        tile, band.name, n_empty, fallback)
    return filled, n_empty


def _to_storage(values: np.ndarray, band: BandDef) -> np.ndarray:
    if band.dtype == "float32":
        return values.astype("<f4")
    out = np.clip(np.rint(values), -32768, 32767)
    if band.nodata is not None and not np.isnan(band.nodata):
        # a median of two valid values may land on the sentinel; move it one step inward
        nd = band.nodata
        out[out == nd] = nd + 1 if nd < 32767 else nd - 1
    return out.astype("<i2")


def regularize(c: CollectionDescriptor, timeline: Timeline, out: str | os.PathLike,
               workers: int = 1, cube_id: str | None = None) -> RegularCube:
    """Composite ``c`` onto ``timeline`` and write a gap-free regular cube under ``out``.

    Each interval [t, t+P) takes the per-pixel median of valid (non-nodata,
    non-cloud) observations dated inside it.  Empty intervals are filled by
    linear interpolation in time, leading and trailing gaps by the nearest
    valid interval.  Pixels never observed at all take the tile-wide band
    median and are counted in ``filled_pixel_count``.
    """
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    bands = tuple(b for b in c.bands if not b.is_cloud_mask)
    grids = tuple(c.tile_grid(t) for t in c.tiles)
    tasks = [(g, b) for g in grids for b in bands]

    def run(task):
        g, b = task
        values, n_filled = _composite_band(c, g.tile, g, b, timeline)
        stored = _to_storage(values, b)
        (root / g.tile).mkdir(exist_ok=True)
        for k, instant in enumerate(timeline.instants):
            write_atomic(root / g.tile / f"{g.tile}_{b.name}_{instant.isoformat()}.bin",
                         stored[k].tobytes())
        return g.tile, n_filled

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]

    filled_by_tile: dict[str, int] = {g.tile: 0 for g in grids}
    for tile, n in results:
        filled_by_tile[tile] += n
    cube = RegularCube(id=cube_id or c.id, crs=c.crs, tiles=grids, bands=bands,
                       timeline=timeline, storage_root=str(root.resolve()),
                       lonlat_affine=c.lonlat_affine,
                       filled_pixel_count=sum(filled_by_tile.values()),
                       filled_by_tile=filled_by_tile)
    write_atomic(root / MANIFEST, json.dumps(cube.to_manifest(), indent=1).encode("utf-8"))
    return cube


@dataclass(frozen=True)
class RasterBlock:
    window: tuple[int, int, int, int]
    values: np.ndarray  # [band][time][row][col], float32 physical values


def _check_window(grid: TileGrid, window: Sequence[int]) -> tuple[int, int, int, int]:
    row0, col0, nrows, ncols = (int(v) for v in window)
    if (row0 < 0 or col0 < 0 or nrows <= 0 or ncols <= 0
            or row0 + nrows > grid.nrows or col0 + ncols > grid.ncols):
        raise ValidationError(f"window {tuple(window)} is outside tile {grid.tile} "
                              f"({grid.nrows}x{grid.ncols})")
    return row0, col0, nrows, ncols


def read_block(cube: RegularCube, tile: str, window: Sequence[int] | None = None,
               bands: Sequence[str] | None = None,
               instants: Sequence[dt.date] | None = None) -> RasterBlock:
    grid = cube.grid(tile)
    if window is None:
        window = (0, 0, grid.nrows, grid.ncols)
    row0, col0, nrows, ncols = _check_window(grid, window)
    band_defs = {b.name: b for b in cube.bands}
    bands = list(bands) if bands is not None else cube.band_names
    instants = list(instants) if instants is not None else list(cube.timeline.instants)
    for b in bands:
        if b not in band_defs:
            raise ValidationError(f"cube {cube.id!r} has no band {b!r}")
    known = set(cube.timeline.instants)
    for t in instants:
        if t not in known:
            raise ValidationError(f"{t} is not an instant of cube {cube.id!r}")

    out = np.empty((len(bands), len(instants), nrows, ncols), dtype=np.float32)
    for i, name in enumerate(bands):
        b = band_defs[name]
        npdt = _NP_DTYPES[b.dtype]
        for j, t in enumerate(instants):
            path = cube.raster_path(tile, name, t)
            try:
                size = path.stat().st_size
            except FileNotFoundError:
                raise CubeIntegrityError(f"missing cube raster {path}") from None
            if size != grid.nrows * grid.ncols * npdt.itemsize:
                raise CubeIntegrityError(f"cube raster {path} has {size} bytes, expected "
                                         f"{grid.nrows * grid.ncols * npdt.itemsize}")
            mm = np.memmap(path, dtype=npdt, mode="r", shape=(grid.nrows, grid.ncols))
            out[i, j] = mm[row0:row0 + nrows, col0:col0 + ncols] * b.scale
            del mm
    return RasterBlock((row0, col0, nrows, ncols), out)


def pixel_at(cube: RegularCube, tile: str, lon: float, lat: float) -> tuple[int, int]:
    """Pixel containing (lon, lat); boundary positions resolve to the lower index."""
    return lonlat_to_pixel(cube.grid(tile), cube.lonlat_affine, lon, lat)


def locate(cube: RegularCube, lon: float, lat: float) -> tuple[str, int, int]:
    """First tile (in cube order) containing the location, with its pixel."""
    for g in cube.tiles:
        try:
            r, c = lonlat_to_pixel(g, cube.lonlat_affine, lon, lat)
        except OutsideExtentError:
            continue
        return g.tile, r, c
    raise OutsideExtentError(f"location ({lon}, {lat}) is outside all tiles of cube {cube.id!r}")


def sample_pixels(cube: RegularCube, tile: str, rows: Sequence[int], cols: Sequence[int]) -> np.ndarray:
    """Series at scattered pixels of one tile as (n, time, band) float32 physical values."""
    grid = cube.grid(tile)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out = np.empty((rows.size, len(cube.timeline), len(cube.bands)), dtype=np.float32)
    for i, b in enumerate(cube.bands):
        npdt = _NP_DTYPES[b.dtype]
        for j, t in enumerate(cube.timeline.instants):
            path = cube.raster_path(tile, b.name, t)
            if not path.exists():
                raise CubeIntegrityError(f"missing cube raster {path}")
            mm = np.memmap(path, dtype=npdt, mode="r", shape=(grid.nrows, grid.ncols))
            out[:, j, i] = mm[rows, cols] * b.scale
            del mm
    return out
