"""Reading and filtering image-collection catalogs.

The catalog is a small JSON subset of STAC: one document lists the
collection's bands and every (tile, date) item with its per-band assets.
Catalogs come from a local file, a directory holding ``catalog.json``, or a
plain unauthenticated HTTP(S) URL.
"""

from __future__ import annotations

import datetime as dt
import json
import os
import re
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from .errors import CatalogError, EmptyResultError
from .geo import IDENTITY_AFFINE, LonLatAffine, TileGrid, bbox_intersects

DTYPES = ("int16", "float32")
MAX_REDIRECTS = 5
_DATE_RE = re.compile(r"^\d{4}-\d{2}-\d{2}$")


@dataclass(frozen=True)
class BandDef:
    name: str
    dtype: str
    scale: float = 1.0
    nodata: float | None = None
    is_cloud_mask: bool = False

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise CatalogError(f"band {self.name!r}: dtype must be one of {DTYPES}, got {self.dtype!r}")

    def to_dict(self) -> dict:
        return {"name": self.name, "dtype": self.dtype, "scale": self.scale,
                "nodata": self.nodata, "cloud_mask": self.is_cloud_mask}

    @classmethod
    def from_dict(cls, d: dict) -> "BandDef":
        nodata = d.get("nodata")
        return cls(name=str(d["name"]), dtype=str(d["dtype"]), scale=float(d.get("scale", 1.0)),
                   nodata=None if nodata is None else float(nodata),
                   is_cloud_mask=bool(d.get("cloud_mask", False)))


@dataclass(frozen=True)
class ItemDescriptor:
    tile: str
    datetime: dt.date
    nrows: int
    ncols: int
    origin: tuple[float, float]
    assets: dict[str, str] = field(default_factory=dict, hash=False)
    cloud_cover: float | None = None

    @property
    def key(self) -> tuple[str, dt.date]:
        return self.tile, self.datetime

    def to_dict(self) -> dict:
        return {"tile": self.tile, "datetime": self.datetime.isoformat(),
                "cloud_cover": self.cloud_cover, "nrows": self.nrows, "ncols": self.ncols,
                "origin": list(self.origin), "assets": dict(self.assets)}


@dataclass(frozen=True)
class CollectionDescriptor:
    id: str
    crs: str
    resolution: tuple[float, float]
    bands: tuple[BandDef, ...]
    items: tuple[ItemDescriptor, ...]
    lonlat_affine: LonLatAffine = LonLatAffine()

    @property
    def band_names(self) -> list[str]:
        return [b.name for b in self.bands]

    @property
    def cloud_band(self) -> BandDef | None:
        masks = [b for b in self.bands if b.is_cloud_mask]
        return masks[0] if masks else None

    @property
    def tiles(self) -> list[str]:
        return sorted({it.tile for it in self.items})

    def tile_items(self, tile: str) -> list[ItemDescriptor]:
        return [it for it in self.items if it.tile == tile]

    def tile_grid(self, tile: str) -> TileGrid:
        items = self.tile_items(tile)
        if not items:
            raise CatalogError(f"no items for tile {tile!r}")
        first = items[0]
        for it in items[1:]:
            if (it.nrows, it.ncols, it.origin) != (first.nrows, first.ncols, first.origin):
                raise CatalogError(f"tile {tile!r}: items on {first.datetime} and "
                                   f"{it.datetime} do not share one grid")
        return TileGrid(tile, first.nrows, first.ncols, first.origin, self.resolution)

    def to_dict(self) -> dict:
        d = {"id": self.id, "crs": self.crs, "resolution": list(self.resolution),
             "bands": [b.to_dict() for b in self.bands],
             "items": [it.to_dict() for it in self.items]}
        if self.lonlat_affine.coeffs != IDENTITY_AFFINE:
            d["lonlat_affine"] = list(self.lonlat_affine.coeffs)
        return d


def _is_url(source: str) -> bool:
    return urllib.parse.urlparse(str(source)).scheme in ("http", "https")


class _LimitedRedirects(urllib.request.HTTPRedirectHandler):
    max_redirections = MAX_REDIRECTS


def fetch_bytes(source: str, timeout: float = 30.0) -> bytes:
    """Read a local path or a plain HTTP(S) URL."""
    if _is_url(source):
        opener = urllib.request.build_opener(_LimitedRedirects())
        try:
            with opener.open(source, timeout=timeout) as resp:
                return resp.read()
        except urllib.error.HTTPError as e:
            raise CatalogError(f"GET {source} failed: HTTP {e.code} {e.reason}") from e
        except urllib.error.URLError as e:
            raise CatalogError(f"GET {source} failed: {e.reason}") from e
    try:
        return Path(source).read_bytes()
    except OSError as e:
        raise CatalogError(f"cannot read {source}: {e.strerror}") from e


def _parse_date(value, where: str) -> dt.date:
    if not isinstance(value, str) or not _DATE_RE.match(value):
        raise CatalogError(f"{where}: datetime must be YYYY-MM-DD, got {value!r}")
    try:
        return dt.date.fromisoformat(value)
    except ValueError as e:
        raise CatalogError(f"{where}: invalid date {value!r}") from e


def _resolve_asset(href: str, base: str) -> str:
    if _is_url(href) or os.path.isabs(href):
        return href
    if _is_url(base):
        return urllib.parse.urljoin(base, href)
    return os.path.normpath(os.path.join(base, href))


def catalog_from_dict(doc: dict, base: str = ".") -> CollectionDescriptor:
    """Validate a decoded catalog document; relative asset paths resolve against ``base``."""
    if not isinstance(doc, dict):
        raise CatalogError("catalog must be a JSON object")
    for key in ("id", "crs", "resolution", "bands", "items"):
        if key not in doc:
            raise CatalogError(f"catalog is missing key {key!r}")
    try:
        bands = tuple(BandDef.from_dict(b) for b in doc["bands"])
    except (KeyError, TypeError) as e:
        raise CatalogError(f"malformed band definition: {e}") from e
    names = [b.name for b in bands]
    if len(set(names)) != len(names):
        raise CatalogError(f"duplicate band names in {names}")
    if sum(b.is_cloud_mask for b in bands) > 1:
        raise CatalogError("at most one band may be a cloud mask")
    res = doc["resolution"]
    if not (isinstance(res, list) and len(res) == 2 and all(float(r) > 0 for r in res)):
        raise CatalogError(f"resolution must be two positive numbers, got {res!r}")

    items = []
    seen: set[tuple[str, dt.date, str]] = set()
    for i, raw in enumerate(doc["items"]):
        where = f"item {i}"
        try:
            tile = str(raw["tile"])
            date = _parse_date(raw["datetime"], where)
            nrows, ncols = int(raw["nrows"]), int(raw["ncols"])
            origin = (float(raw["origin"][0]), float(raw["origin"][1]))
            assets = raw["assets"]
        except (KeyError, TypeError, IndexError) as e:
            raise CatalogError(f"{where}: malformed item ({e})") from e
        if nrows <= 0 or ncols <= 0:
            raise CatalogError(f"{where}: nrows and ncols must be positive")
        cc = raw.get("cloud_cover")
        if cc is not None and not 0 <= float(cc) <= 100:
            raise CatalogError(f"{where}: cloud_cover must lie in [0, 100]")
        resolved = {}
        for band, href in assets.items():
            if band not in names:
                raise CatalogError(f"{where} (tile {tile}, {date}): unknown band {band!r}")
            k = (tile, date, band)
            if k in seen:
                raise CatalogError(f"duplicate asset for tile {tile}, {date}, band {band}")
            seen.add(k)
            resolved[band] = _resolve_asset(str(href), base)
        items.append(ItemDescriptor(tile, date, nrows, ncols, origin, resolved,
                                    None if cc is None else float(cc)))
    items.sort(key=lambda it: (it.tile, it.datetime))
    affine = LonLatAffine(tuple(float(v) for v in doc.get("lonlat_affine", IDENTITY_AFFINE)))
    return CollectionDescriptor(str(doc["id"]), str(doc["crs"]),
                                (float(res[0]), float(res[1])), bands, tuple(items), affine)


def parse_catalog(source: str | os.PathLike) -> CollectionDescriptor:
    source = str(source)
    if not _is_url(source) and os.path.isdir(source):
        source = os.path.join(source, "catalog.json")
    raw = fetch_bytes(source)
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CatalogError(f"{source}: malformed JSON ({e})") from e
    if _is_url(source):
        base = source.rsplit("/", 1)[0] + "/"
    else:
        base = os.path.dirname(os.path.abspath(source))
    return catalog_from_dict(doc, base)


def write_catalog(c: CollectionDescriptor, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(c.to_dict(), indent=1), encoding="utf-8")


def filter_items(c: CollectionDescriptor, tiles: Sequence[str] | None = None,
                 roi: Iterable[float] | None = None,
                 start: dt.date | None = None, end: dt.date | None = None) -> CollectionDescriptor:
    """Select items by tile id, lon/lat bounding box and inclusive date range.

    ``roi`` is ``(lon_min, lat_min, lon_max, lat_max)``; a tile is kept when its
    footprint intersects the box.  An empty selection raises EmptyResultError.
    """
    if start is not None and end is not None and start > end:
        raise CatalogError(f"start {start} is after end {end}")
    keep_tiles = set(c.tiles)
    if tiles is not None:
        keep_tiles &= set(tiles)
    if roi is not None:
        box = tuple(float(v) for v in roi)
        if len(box) != 4 or box[0] > box[2] or box[1] > box[3]:
            raise CatalogError(f"roi must be lon_min,lat_min,lon_max,lat_max; got {box}")
        keep_tiles = {t for t in keep_tiles
                      if bbox_intersects(c.tile_grid(t).lonlat_bbox(c.lonlat_affine), box)}
    items = tuple(it for it in c.items
                  if it.tile in keep_tiles
                  and (start is None or it.datetime >= start)
                  and (end is None or it.datetime <= end))
    if not items:
        raise EmptyResultError(
            f"no items in collection {c.id!r} match tiles={list(tiles) if tiles else None}, "
            f"roi={None if roi is None else list(roi)}, start={start}, end={end}")
    return replace(c, items=items)
