"""Bayesian spatial smoothing of probability cubes and final label maps.

Per pixel, class probabilities become log-odds ``x``.  Over a square window
(cropped at tile borders) the neighbourhood mean ``m`` and covariance ``S``
are estimated, and the smoothed log-odds are

    theta = Sigma (Sigma + S)^-1 m + S (Sigma + S)^-1 x

with ``Sigma`` a user-supplied prior covariance.  Each pixel is computed
from its own window only, with a fixed accumulation order, so strips read
with a halo of ``(window - 1) // 2`` rows reproduce the whole-tile result
bit for bit.
"""

from __future__ import annotations

import json
import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .cube import write_atomic
from .engine import PROB_SCALE, ProbCube, load_probs, new_probcube, write_probs_manifest
from .errors import CubeIntegrityError, ValidationError
from .geo import LonLatAffine, TileGrid
from .quality import PALETTE, write_ppm


@dataclass(frozen=True)
class SmoothParams:
    window: int = 7
    sigma: float | Sequence[Sequence[float]] = 20.0  # scalar s means s * identity
    eps: float = 1e-4
    ridge: float = 1e-6

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValidationError(f"window must be an odd integer >= 1, got {self.window}")
        if not 0 < self.eps < 0.5:
            raise ValidationError(f"eps must lie in (0, 0.5), got {self.eps}")
        if self.ridge < 0:
            raise ValidationError("ridge must be >= 0")

    def sigma_matrix(self, n_classes: int) -> np.ndarray:
        s = np.asarray(self.sigma, dtype=np.float64)
        if s.ndim == 0:
            s = float(s) * np.eye(n_classes)
        if s.shape != (n_classes, n_classes):
            raise ValidationError(f"sigma must be {n_classes}x{n_classes}, got {s.shape}")
        if not np.allclose(s, s.T):
            raise ValidationError("sigma must be symmetric")
        try:
            np.linalg.cholesky(s)
        except np.linalg.LinAlgError:
            raise ValidationError("sigma must be positive definite") from None
        return s


def logit_transform(p: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Log-odds of each class probability after clamping to [eps, 1 - eps]."""
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    return np.log(p / (1.0 - p))


def inverse_logit(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def neighborhood_stats(x: np.ndarray, window: int, ridge: float = 0.0):
    """Windowed mean (H, W, K) and covariance (H, W, K, K) of log-odds ``x`` (K, H, W).

    Windows are cropped at the array border; covariance uses divisor n - 1
    (zero for single-pixel windows) plus ``ridge`` on the diagonal.
    """
    k, h, w = x.shape
    r = window // 2
    xp = np.pad(x, ((0, 0), (r, r), (r, r)))
    vp = np.pad(np.ones((h, w)), r)
    total = np.zeros((k, h, w))
    n = np.zeros((h, w))
    for dy in range(window):
        for dx in range(window):
            total += xp[:, dy:dy + h, dx:dx + w]
            n += vp[dy:dy + h, dx:dx + w]
    mean = total / n
    cov = np.zeros((h, w, k, k))
    for dy in range(window):
        for dx in range(window):
            d = (xp[:, dy:dy + h, dx:dx + w] - mean) * vp[dy:dy + h, dx:dx + w]
            cov += np.einsum("ihw,jhw->hwij", d, d)
    denom = np.where(n > 1, n - 1, 1.0)
    cov = np.where((n > 1)[:, :, None, None], cov / denom[:, :, None, None], 0.0)
    cov += ridge * np.eye(k)
    return mean.transpose(1, 2, 0), cov


def smooth_logits(x: np.ndarray, params: SmoothParams) -> np.ndarray:
    """Posterior log-odds ``theta`` (K, H, W) for log-odds ``x`` (K, H, W)."""
    if not np.all(np.isfinite(x)):
        raise CubeIntegrityError("non-finite log-odds in smoothing input")
    k = x.shape[0]
    sigma = params.sigma_matrix(k)
    m, s = neighborhood_stats(x, params.window, params.ridge)
    xi = x.transpose(1, 2, 0)
    a = sigma + s
    sol = np.linalg.solve(a, np.stack([m, xi], axis=-1))
    theta = (np.einsum("ij,hwj->hwi", sigma, sol[..., 0])
             + np.einsum("hwij,hwj->hwi", s, sol[..., 1]))
    return theta.transpose(2, 0, 1)


def smooth_probabilities(p: np.ndarray, params: SmoothParams) -> np.ndarray:
    """Smoothed probabilities (K, H, W), renormalized to sum to one per pixel."""
    theta = smooth_logits(logit_transform(p, params.eps), params)
    q = inverse_logit(theta)
    return q / q.sum(axis=0, keepdims=True)


def _strip_windows(nrows: int, strip_rows: int, halo: int):
    for r0 in range(0, nrows, strip_rows):
        r1 = min(r0 + strip_rows, nrows)
        a, b = max(0, r0 - halo), min(nrows, r1 + halo)
        yield r0, r1, a, b


def _smooth_strip(root: str, tile: str, r0: int, r1: int, a: int, b: int,
                  params: SmoothParams) -> np.ndarray:
    probs = load_probs(root)
    g = probs.grid(tile)
    p = probs.probabilities(tile, (a, 0, b - a, g.ncols))
    q = smooth_probabilities(p, params)[:, r0 - a:r1 - a]
    return np.clip(np.rint(q * PROB_SCALE), 0, PROB_SCALE).astype("<i2")


def bayes_smooth(probs: ProbCube, params: SmoothParams, out_dir: str | os.PathLike,
                 strip_rows: int | None = None, workers: int = 1) -> ProbCube:
    """Smooth every tile of ``probs`` and write the result as a new ProbCube.

    Tiles are processed in row strips of ``strip_rows`` (whole tile by
    default), each read with a halo so the result equals whole-tile smoothing.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if out.resolve() == Path(probs.root).resolve():
        raise ValidationError("smoothing output must go to a different directory")
    result = new_probcube(out, probs.cube_id, probs.crs, probs.labels, probs.tiles,
                          probs.lonlat_affine)
    halo = params.window // 2
    ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else None
    pool = ProcessPoolExecutor(max_workers=workers, mp_context=ctx) if workers > 1 else None
    try:
        for g in probs.tiles:
            strips = list(_strip_windows(g.nrows, strip_rows or g.nrows, halo))
            args = [(probs.root, g.tile, *s, params) for s in strips]
            parts = pool.map(_smooth_strip, *zip(*args)) if pool else (_smooth_strip(*a) for a in args)
            tmps = {lab: result.path(g.tile, lab).with_name(result.files[g.tile][lab] + ".tmp")
                    for lab in probs.labels}
            handles = {lab: open(t, "wb") for lab, t in tmps.items()}
            try:
                for part in parts:  # results arrive in strip order
                    for k, lab in enumerate(probs.labels):
                        handles[lab].write(np.ascontiguousarray(part[k]).tobytes())
            finally:
                for fh in handles.values():
                    fh.close()
            for lab, t in tmps.items():
                os.replace(t, result.path(g.tile, lab))
    finally:
        if pool is not None:
            pool.shutdown()
    write_probs_manifest(result, {"source": "smooth", "window": params.window,
                                  "sigma": np.asarray(params.sigma).tolist(),
                                  "eps": params.eps, "ridge": params.ridge})
    return load_probs(out)


# -- label maps ------------------------------------------------------------------

@dataclass(frozen=True)
class LabelMap:
    root: str
    legend: tuple[str, ...]
    tiles: tuple[TileGrid, ...]
    crs: str = ""
    lonlat_affine: LonLatAffine = LonLatAffine()
    pixel_area: float = field(default=1.0)

    def grid(self, tile: str) -> TileGrid:
        for g in self.tiles:
            if g.tile == tile:
                return g
        raise ValidationError(f"label map has no tile {tile!r}")

    def path(self, tile: str) -> Path:
        return Path(self.root) / f"{tile}_class.bin"

    def read(self, tile: str) -> np.ndarray:
        g = self.grid(tile)
        p = self.path(tile)
        if not p.exists() or p.stat().st_size != g.nrows * g.ncols:
            raise CubeIntegrityError(f"class raster {p} is missing or truncated")
        return np.fromfile(p, dtype=np.uint8).reshape(g.nrows, g.ncols)

    def class_counts(self) -> np.ndarray:
        counts = np.zeros(len(self.legend), dtype=np.int64)
        for g in self.tiles:
            counts += np.bincount(self.read(g.tile).ravel(), minlength=len(self.legend))[:len(self.legend)]
        return counts


def write_label_map(root, legend: Sequence[str], tiles: Sequence[TileGrid], rasters: dict,
                    crs: str = "", affine: LonLatAffine = LonLatAffine(),
                    ppm: bool = True) -> LabelMap:
    """Write ``{tile}_class.bin`` rasters, ``legend.json`` and ``map.json``."""
    if len(legend) > 256:
        raise ValidationError("label maps hold at most 256 classes")
    out = Path(root)
    out.mkdir(parents=True, exist_ok=True)
    for g in tiles:
        arr = np.asarray(rasters[g.tile], dtype=np.uint8)
        write_atomic(out / f"{g.tile}_class.bin", arr.tobytes())
        if ppm:
            colors = np.array([PALETTE[i % len(PALETTE)] for i in range(len(legend))], dtype=np.uint8)
            write_ppm(out / (f"{g.tile}_class_map.ppm" if len(tiles) > 1 else "class_map.ppm"),
                      colors[arr])
    write_atomic(out / "legend.json",
                 json.dumps({str(i): lab for i, lab in enumerate(legend)}, indent=1).encode())
    res = tiles[0].resolution if tiles else (1.0, 1.0)
    meta = {"legend": list(legend), "crs": crs, "lonlat_affine": list(affine.coeffs),
            "tiles": [g.to_dict() for g in tiles], "pixel_area": res[0] * res[1]}
    write_atomic(out / "map.json", json.dumps(meta, indent=1).encode())
    return LabelMap(str(out.resolve()), tuple(legend), tuple(tiles), crs, affine, res[0] * res[1])


def load_label_map(root: str | os.PathLike) -> LabelMap:
    path = Path(root) / "map.json"
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"{path}: no label map manifest") from None
    return LabelMap(str(Path(root).resolve()), tuple(d["legend"]),
                    tuple(TileGrid.from_dict(t) for t in d["tiles"]), d.get("crs", ""),
                    LonLatAffine(tuple(d["lonlat_affine"])), float(d.get("pixel_area", 1.0)))


def label_map(probs: ProbCube, out_dir: str | os.PathLike, ppm: bool = True) -> LabelMap:
    """Most likely class per pixel; ties resolve to the lowest class index."""
    rasters = {g.tile: np.argmax(probs.read(g.tile), axis=0).astype(np.uint8) for g in probs.tiles}
    return write_label_map(out_dir, probs.labels, probs.tiles, rasters, probs.crs,
                           probs.lonlat_affine, ppm)
