"""Grid georeferencing helpers.

Grids are north-up: ``origin`` is the upper-left corner in CRS units, columns
grow with x and rows grow towards decreasing y.  Conversion between CRS units
and longitude/latitude uses a six-parameter affine declared by the catalog::

    lon = a + b*x + c*y
    lat = d + e*x + f*y
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import OutsideExtentError

IDENTITY_AFFINE = (0.0, 1.0, 0.0, 0.0, 0.0, 1.0)


@dataclass(frozen=True)
class LonLatAffine:
    coeffs: tuple[float, float, float, float, float, float] = IDENTITY_AFFINE

    def __post_init__(self):
        if len(self.coeffs) != 6:
            raise ValueError("lon/lat affine needs exactly six coefficients")
        a, b, c, d, e, f = self.coeffs
        if b * f - c * e == 0:
            raise ValueError("lon/lat affine is singular")

    def to_lonlat(self, x: float, y: float) -> tuple[float, float]:
        a, b, c, d, e, f = self.coeffs
        return a + b * x + c * y, d + e * x + f * y

    def to_crs(self, lon: float, lat: float) -> tuple[float, float]:
        a, b, c, d, e, f = self.coeffs
        det = b * f - c * e
        u, v = lon - a, lat - d
        return (f * u - c * v) / det, (b * v - e * u) / det


@dataclass(frozen=True)
class TileGrid:
    tile: str
    nrows: int
    ncols: int
    origin: tuple[float, float]
    resolution: tuple[float, float]

    def __post_init__(self):
        if self.nrows <= 0 or self.ncols <= 0:
            raise ValueError(f"tile {self.tile}: grid size must be positive")
        if self.resolution[0] <= 0 or self.resolution[1] <= 0:
            raise ValueError(f"tile {self.tile}: resolution must be positive")

    def bounds(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) in CRS units."""
        x0, y0 = self.origin
        return (x0, y0 - self.nrows * self.resolution[1],
                x0 + self.ncols * self.resolution[0], y0)

    def pixel_center(self, row: int, col: int) -> tuple[float, float]:
        x0, y0 = self.origin
        return (x0 + (col + 0.5) * self.resolution[0],
                y0 - (row + 0.5) * self.resolution[1])

    def lonlat_bbox(self, affine: LonLatAffine) -> tuple[float, float, float, float]:
        xmin, ymin, xmax, ymax = self.bounds()
        corners = [affine.to_lonlat(x, y) for x in (xmin, xmax) for y in (ymin, ymax)]
        lons = [c[0] for c in corners]
        lats = [c[1] for c in corners]
        return min(lons), min(lats), max(lons), max(lats)

    def to_dict(self) -> dict:
        return {"tile": self.tile, "nrows": self.nrows, "ncols": self.ncols,
                "origin": list(self.origin), "resolution": list(self.resolution)}

    @classmethod
    def from_dict(cls, d: dict) -> "TileGrid":
        return cls(str(d["tile"]), int(d["nrows"]), int(d["ncols"]),
                   (float(d["origin"][0]), float(d["origin"][1])),
                   (float(d["resolution"][0]), float(d["resolution"][1])))


def _edge_index(pos: float, n: int) -> int:
    # A position exactly on the boundary between two pixels goes to the lower index.
    idx = math.ceil(pos) - 1
    return min(max(idx, 0), n - 1)


def crs_to_pixel(grid: TileGrid, x: float, y: float) -> tuple[int, int]:
    """Map CRS coordinates to the containing pixel, raising when outside."""
    x0, y0 = grid.origin
    col_f = (x - x0) / grid.resolution[0]
    row_f = (y0 - y) / grid.resolution[1]
    if not (0.0 <= col_f <= grid.ncols and 0.0 <= row_f <= grid.nrows):
        raise OutsideExtentError(f"location ({x}, {y}) is outside tile {grid.tile}")
    return _edge_index(row_f, grid.nrows), _edge_index(col_f, grid.ncols)


def lonlat_to_pixel(grid: TileGrid, affine: LonLatAffine, lon: float, lat: float) -> tuple[int, int]:
    x, y = affine.to_crs(lon, lat)
    return crs_to_pixel(grid, x, y)


def bbox_intersects(a, b) -> bool:
    return a[0] <= b[2] and b[0] <= a[2] and a[1] <= b[3] and b[1] <= a[3]
