"""Chunked, resumable, parallel classification of a regular cube.

A job splits every tile into row strips sized from the memory budget and
core count.  Workers classify one strip each, writing ``chunk_{id}.bin``
(int16 probabilities x 10000, [class][row][col]) and then a
``chunk_{id}.done`` marker holding the output length and CRC32.  Only the
orchestrator writes ``job.json``.  Once every chunk is done the strips are
concatenated into per-tile, per-class rasters described by ``probs.json``.

Resuming trusts markers, not ``job.json``: a chunk counts as done only when
its marker, byte length and checksum all agree.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import multiprocessing as mp
import os
import re
import uuid
import zlib
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .cube import RegularCube, load_cube, read_block, write_atomic
from .errors import (CubeIntegrityError, InsufficientMemoryError, JobFailedError,
                     ValidationError)
from .geo import LonLatAffine, TileGrid
from .models import TrainedModel, load_model, predict_probs, save_model
from .models.base import model_bytes

log = logging.getLogger(__name__)

JOB_FORMAT_VERSION = 1
PROB_SCALE = 10000
MEMORY_SAFETY = 0.8
PREDICT_BATCH = 4096
MAX_RETRIES = 3
MODEL_FILE = "model.tcm"
PENDING, DONE, FAILED = "pending", "done", "failed"


@dataclass(frozen=True)
class Chunk:
    chunk_id: int
    tile: str
    window: tuple[int, int, int, int]  # row0, col0, nrows, ncols

    def to_dict(self) -> dict:
        return {"chunk_id": self.chunk_id, "tile": self.tile, "window": list(self.window)}

    @classmethod
    def from_dict(cls, d: dict) -> "Chunk":
        return cls(int(d["chunk_id"]), str(d["tile"]), tuple(int(v) for v in d["window"]))


@dataclass(frozen=True)
class ChunkPlan:
    cube_id: str
    chunks: tuple[Chunk, ...]
    max_workers: int

    def to_dict(self) -> dict:
        return {"cube_id": self.cube_id, "max_workers": self.max_workers,
                "chunks": [c.to_dict() for c in self.chunks]}

    @classmethod
    def from_dict(cls, d: dict) -> "ChunkPlan":
        return cls(d["cube_id"], tuple(Chunk.from_dict(c) for c in d["chunks"]),
                   int(d["max_workers"]))


def chunk_bytes(n_rows: int, n_cols: int, n_bands: int, n_times: int, n_classes: int) -> int:
    """Working-set estimate: float32 inputs plus int16 class outputs."""
    return n_rows * n_cols * n_bands * n_times * 4 + n_rows * n_cols * n_classes * 2


def plan_chunks(cube: RegularCube, memory_bytes: int, cores: int, n_classes: int,
                strip_rows: int | None = None) -> ChunkPlan:
    """Row-strip plan: the tallest strip such that ``cores`` strips fit in 80% of memory.

    ``strip_rows`` overrides the computed height (still clamped to the tile).
    """
    if memory_bytes < 1 or cores < 1:
        raise ValidationError("memory and cores must be >= 1")
    nb, nt = len(cube.bands), len(cube.timeline)
    chunks = []
    for g in cube.tiles:
        per_row = chunk_bytes(1, g.ncols, nb, nt, n_classes)
        if strip_rows is not None:
            h = int(strip_rows)
        else:
            h = math.floor(MEMORY_SAFETY * memory_bytes / (cores * per_row))
            if h < 1:
                need = math.ceil(cores * per_row / MEMORY_SAFETY)
                raise InsufficientMemoryError(
                    f"insufficient memory: one-row strips of tile {g.tile} on {cores} cores "
                    f"need {need} bytes, budget is {memory_bytes}")
        h = min(max(h, 1), g.nrows)
        for row0 in range(0, g.nrows, h):
            chunks.append(Chunk(len(chunks), g.tile, (row0, 0, min(h, g.nrows - row0), g.ncols)))
    return ChunkPlan(cube.id, tuple(chunks), min(cores, len(chunks)))


# -- probability cubes ---------------------------------------------------------

def _safe(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", label)


@dataclass(frozen=True)
class ProbCube:
    root: str
    cube_id: str
    crs: str
    labels: tuple[str, ...]
    tiles: tuple[TileGrid, ...]
    lonlat_affine: LonLatAffine = LonLatAffine()
    files: dict = field(default_factory=dict, compare=False, hash=False)

    def grid(self, tile: str) -> TileGrid:
        for g in self.tiles:
            if g.tile == tile:
                return g
        raise ValidationError(f"probability cube has no tile {tile!r}")

    def path(self, tile: str, label: str) -> Path:
        return Path(self.root) / self.files[tile][label]

    def read(self, tile: str, window: Sequence[int] | None = None) -> np.ndarray:
        """Stored int16 probabilities (x10000) as [class][row][col]."""
        g = self.grid(tile)
        row0, col0, nr, nc = window if window is not None else (0, 0, g.nrows, g.ncols)
        out = np.empty((len(self.labels), nr, nc), dtype=np.int16)
        for k, lab in enumerate(self.labels):
            p = self.path(tile, lab)
            if not p.exists() or p.stat().st_size != g.nrows * g.ncols * 2:
                raise CubeIntegrityError(f"probability raster {p} is missing or truncated")
            mm = np.memmap(p, dtype="<i2", mode="r", shape=(g.nrows, g.ncols))
            out[k] = mm[row0:row0 + nr, col0:col0 + nc]
            del mm
        return out

    def probabilities(self, tile: str, window: Sequence[int] | None = None) -> np.ndarray:
        return self.read(tile, window).astype(np.float64) / PROB_SCALE

    def manifest(self, extra: dict | None = None) -> dict:
        d = {"format_version": JOB_FORMAT_VERSION, "cube_id": self.cube_id, "crs": self.crs,
             "labels": list(self.labels), "scale": 1.0 / PROB_SCALE,
             "tiles": [g.to_dict() for g in self.tiles],
             "lonlat_affine": list(self.lonlat_affine.coeffs), "files": self.files}
        d.update(extra or {})
        return d


def new_probcube(root, cube_id, crs, labels, tiles, affine) -> ProbCube:
    files = {g.tile: {lab: f"{g.tile}_prob_{_safe(lab)}.bin" for lab in labels} for g in tiles}
    return ProbCube(str(Path(root).resolve()), cube_id, crs, tuple(labels), tuple(tiles),
                    affine, files)


def write_probs_manifest(p: ProbCube, extra: dict | None = None) -> None:
    write_atomic(Path(p.root) / "probs.json", json.dumps(p.manifest(extra), indent=1).encode())


def load_probs(root: str | os.PathLike) -> ProbCube:
    path = Path(root) / "probs.json"
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"{path}: no probability cube manifest") from None
    return ProbCube(str(Path(root).resolve()), d["cube_id"], d["crs"], tuple(d["labels"]),
                    tuple(TileGrid.from_dict(t) for t in d["tiles"]),
                    LonLatAffine(tuple(d["lonlat_affine"])), d["files"])


# -- job state -------------------------------------------------------------------

@dataclass
class JobState:
    job_id: str
    plan: ChunkPlan
    out_dir: str
    cube_root: str
    cube_hash: str
    model_hash: str
    labels: tuple[str, ...]
    status: dict[int, str]
    retries: dict[int, int]
    merged: dict = field(default_factory=dict)
    errors: dict[int, str] = field(default_factory=dict)  # last failure message per chunk
    executed: list[int] = field(default_factory=list)  # chunks run by the latest call

    def to_dict(self) -> dict:
        return {"format_version": JOB_FORMAT_VERSION, "job_id": self.job_id,
                "plan": self.plan.to_dict(), "cube_root": self.cube_root,
                "cube_manifest_hash": self.cube_hash, "model_file": MODEL_FILE,
                "model_hash": self.model_hash, "labels": list(self.labels),
                "status": {str(k): v for k, v in sorted(self.status.items())},
                "retries": {str(k): v for k, v in sorted(self.retries.items())},
                "merged": self.merged,
                "errors": {str(k): v for k, v in sorted(self.errors.items())}}

    @classmethod
    def from_dict(cls, d: dict, out_dir: str) -> "JobState":
        if d.get("format_version", 1) > JOB_FORMAT_VERSION:
            raise ValidationError(f"job format {d['format_version']} is newer than supported")
        return cls(d["job_id"], ChunkPlan.from_dict(d["plan"]), out_dir, d["cube_root"],
                   d["cube_manifest_hash"], d["model_hash"], tuple(d["labels"]),
                   {int(k): v for k, v in d["status"].items()},
                   {int(k): int(v) for k, v in d["retries"].items()}, d.get("merged", {}),
                   {int(k): v for k, v in d.get("errors", {}).items()})

    def persist(self) -> None:
        write_atomic(Path(self.out_dir) / "job.json",
                     json.dumps(self.to_dict(), indent=1).encode("utf-8"))

    @property
    def done(self) -> bool:
        return all(s == DONE for s in self.status.values())


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _crc(path: Path) -> int:
    crc = 0
    with open(path, "rb") as fh:
        for blk in iter(lambda: fh.read(1 << 20), b""):
            crc = zlib.crc32(blk, crc)
    return crc


def chunk_paths(out_dir, chunk_id: int) -> tuple[Path, Path]:
    d = Path(out_dir)
    return d / f"chunk_{chunk_id}.bin", d / f"chunk_{chunk_id}.done"


def expected_chunk_length(chunk: Chunk, n_classes: int) -> int:
    return n_classes * chunk.window[2] * chunk.window[3] * 2


def chunk_is_valid(out_dir, chunk: Chunk, n_classes: int) -> bool:
    data, marker = chunk_paths(out_dir, chunk.chunk_id)
    try:
        length_s, crc_s = marker.read_text().split()
        size = data.stat().st_size
    except (OSError, ValueError):
        return False
    expected = expected_chunk_length(chunk, n_classes)
    if int(length_s) != expected or size != expected:
        return False
    return _crc(data) == int(crc_s, 16)


# -- worker side -------------------------------------------------------------------

_MODEL_CACHE: dict[tuple[str, str], TrainedModel] = {}


def _cached_model(path: str, digest: str) -> TrainedModel:
    key = (path, digest)
    if key not in _MODEL_CACHE:
        _MODEL_CACHE.clear()
        _MODEL_CACHE[key] = load_model(path)
    return _MODEL_CACHE[key]


def classify_block(model: TrainedModel, values: np.ndarray, batch_rows: int = PREDICT_BATCH) -> np.ndarray:
    """[band][time][row][col] block -> int16 [class][row][col] probabilities x 10000."""
    nb, nt, nr, nc = values.shape
    pixels = values.transpose(2, 3, 1, 0).reshape(nr * nc, nt * nb)
    k = len(model.labels)
    out = np.empty((nr * nc, k))
    for s in range(0, pixels.shape[0], batch_rows):
        out[s:s + batch_rows] = predict_probs(model, pixels[s:s + batch_rows])
    scaled = np.clip(np.rint(out * PROB_SCALE), 0, PROB_SCALE).astype("<i2")
    return scaled.T.reshape(k, nr, nc)


def run_chunk(cube_root: str, model_path: str, model_hash: str, chunk: Chunk, out_dir: str,
              batch_rows: int = PREDICT_BATCH) -> tuple[int, int, int]:
    """Classify one chunk; touches only its input window and its own output files."""
    cube = load_cube(cube_root)
    model = _cached_model(model_path, model_hash)
    block = read_block(cube, chunk.tile, chunk.window)
    data = classify_block(model, block.values, batch_rows).tobytes()
    data_path, marker = chunk_paths(out_dir, chunk.chunk_id)
    write_atomic(data_path, data)
    crc = zlib.crc32(data)
    write_atomic(marker, f"{len(data)} {crc:08x}\n".encode("ascii"))
    return chunk.chunk_id, len(data), crc


# -- orchestrator ---------------------------------------------------------------------

def _merge_outputs(job: JobState) -> dict:
    cube = load_cube(job.cube_root)
    probs = new_probcube(job.out_dir, cube.id, cube.crs, job.labels, cube.tiles, cube.lonlat_affine)
    k = len(job.labels)
    merged = {}
    for g in cube.tiles:
        strips = sorted((c for c in job.plan.chunks if c.tile == g.tile), key=lambda c: c.window[0])
        for ci, lab in enumerate(job.labels):
            target = probs.path(g.tile, lab)
            tmp = target.with_name(target.name + ".tmp")
            with open(tmp, "wb") as fh:
                for c in strips:
                    data_path, _ = chunk_paths(job.out_dir, c.chunk_id)
                    if not data_path.exists():
                        raise CubeIntegrityError(f"missing chunk output {data_path}")
                    _, _, nr, nc = c.window
                    mm = np.memmap(data_path, dtype="<i2", mode="r", shape=(k, nr, nc))
                    fh.write(np.ascontiguousarray(mm[ci]).tobytes())
                    del mm
            os.replace(tmp, target)
            merged[target.name] = _crc(target)
    write_probs_manifest(probs, {"source": "classify", "job_id": job.job_id})
    return merged


def merged_is_valid(job: JobState) -> bool:
    if not job.merged:
        return False
    return all((Path(job.out_dir) / name).exists() and _crc(Path(job.out_dir) / name) == crc
               for name, crc in job.merged.items()) and (Path(job.out_dir) / "probs.json").exists()


def merge_chunks(job: JobState, clean: bool = False) -> ProbCube:
    if not job.done:
        pending = [c for c, s in job.status.items() if s != DONE]
        raise ValidationError(f"cannot merge: chunks {pending} are not done")
    job.merged = _merge_outputs(job)
    job.persist()
    if clean:
        for c in job.plan.chunks:
            for p in chunk_paths(job.out_dir, c.chunk_id):
                p.unlink(missing_ok=True)
    return load_probs(job.out_dir)


def _execute(job: JobState, pending: list[Chunk], max_retries: int, batch_rows: int,
             on_chunk_done: Callable[[int, JobState], None] | None) -> None:
    model_path = str(Path(job.out_dir) / MODEL_FILE)
    args = (job.cube_root, model_path, job.model_hash)

    def finished(cid):
        job.status[cid] = DONE
        job.executed.append(cid)
        job.persist()
        if on_chunk_done is not None:
            on_chunk_done(cid, job)

    def failed(chunk, exc) -> bool:
        job.retries[chunk.chunk_id] = job.retries.get(chunk.chunk_id, 0) + 1
        job.errors[chunk.chunk_id] = f"{type(exc).__name__}: {exc}"
        if job.retries[chunk.chunk_id] > max_retries:
            job.status[chunk.chunk_id] = FAILED
            job.persist()
            log.error("chunk %d failed permanently: %s", chunk.chunk_id, exc)
            return False
        log.warning("chunk %d failed (%s); retry %d/%d", chunk.chunk_id, exc,
                    job.retries[chunk.chunk_id], max_retries)
        job.persist()
        return True

    workers = min(job.plan.max_workers, len(pending))
    if workers <= 1:
        for chunk in pending:
            while True:
                try:
                    run_chunk(*args, chunk, job.out_dir, batch_rows)
                except Exception as exc:  # noqa: BLE001 - any chunk failure is retried
                    if failed(chunk, exc):
                        continue
                    break
                finished(chunk.chunk_id)
                break
        return

    ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else None
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        running = {}
        # lowest chunk id first
        for chunk in pending:
            running[pool.submit(run_chunk, *args, chunk, job.out_dir, batch_rows)] = chunk
        while running:
            done, _ = wait(running, return_when=FIRST_COMPLETED)
            for fut in sorted(done, key=lambda f: running[f].chunk_id):
                chunk = running.pop(fut)
                exc = fut.exception()
                if exc is None:
                    finished(chunk.chunk_id)
                elif failed(chunk, exc):
                    running[pool.submit(run_chunk, *args, chunk, job.out_dir, batch_rows)] = chunk


def _run(job: JobState, max_retries: int, batch_rows: int, clean: bool,
         on_chunk_done) -> tuple[ProbCube, JobState]:
    k = len(job.labels)
    if job.done and merged_is_valid(job):
        job.executed = []
        return load_probs(job.out_dir), job
    pending = []
    for c in job.plan.chunks:
        if chunk_is_valid(job.out_dir, c, k):
            job.status[c.chunk_id] = DONE
        else:
            job.status[c.chunk_id] = PENDING
            job.retries[c.chunk_id] = 0
            job.errors.pop(c.chunk_id, None)
            pending.append(c)
    job.merged = {}
    job.executed = []
    job.persist()
    _execute(job, pending, max_retries, batch_rows, on_chunk_done)
    if not job.done:
        bad = sorted(c for c, s in job.status.items() if s != DONE)
        raise JobFailedError(f"chunks {bad} failed after {max_retries} retries "
                             f"(chunk {bad[0]}: {job.errors.get(bad[0], 'unknown error')}); "
                             f"job state saved in {job.out_dir}, run resume to finish", job.out_dir)
    return merge_chunks(job, clean), job


def classify_cube(cube: RegularCube, model: TrainedModel, plan: ChunkPlan, out_dir: str | os.PathLike,
                  max_retries: int = MAX_RETRIES, batch_rows: int = PREDICT_BATCH,
                  clean: bool = False,
                  on_chunk_done: Callable[[int, JobState], None] | None = None
                  ) -> tuple[ProbCube, JobState]:
    """Classify every chunk of ``plan`` and merge the strips into a ProbCube.

    ``on_chunk_done(chunk_id, job)`` runs in the orchestrator after each chunk
    is recorded; an exception raised there aborts the job, leaving it resumable.
    """
    if model.layout != (len(cube.timeline), len(cube.bands)):
        raise ValidationError(f"model expects (times, bands) = {model.layout}, cube has "
                              f"({len(cube.timeline)}, {len(cube.bands)})")
    if plan.cube_id != cube.id:
        raise ValidationError(f"plan is for cube {plan.cube_id!r}, not {cube.id!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    job_file = out / "job.json"
    model_path = out / MODEL_FILE
    if job_file.exists():
        old = JobState.from_dict(json.loads(job_file.read_text()), str(out.resolve()))
        if old.cube_hash != cube.manifest_hash() or old.plan != plan or \
                _sha256(model_path) != hashlib.sha256(model_bytes(model)).hexdigest():
            raise ValidationError(f"{out} already holds a different classification job")
        return _run(old, max_retries, batch_rows, clean, on_chunk_done)
    save_model(model, model_path)
    job = JobState(uuid.uuid4().hex, plan, str(out.resolve()), cube.storage_root,
                   cube.manifest_hash(), _sha256(model_path), tuple(model.labels),
                   {c.chunk_id: PENDING for c in plan.chunks}, {c.chunk_id: 0 for c in plan.chunks})
    job.persist()
    return _run(job, max_retries, batch_rows, clean, on_chunk_done)


def load_job(job_dir: str | os.PathLike) -> JobState:
    path = Path(job_dir) / "job.json"
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"{path}: no job to resume") from None
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: corrupt job file ({e})") from e
    return JobState.from_dict(doc, str(Path(job_dir).resolve()))


def resume(job_dir: str | os.PathLike, max_retries: int = MAX_RETRIES,
           batch_rows: int = PREDICT_BATCH, clean: bool = False,
           on_chunk_done: Callable[[int, JobState], None] | None = None) -> tuple[ProbCube, JobState]:
    """Finish a job, re-running only chunks without a valid marker."""
    job = load_job(job_dir)
    cube = load_cube(job.cube_root)
    if cube.manifest_hash() != job.cube_hash:
        raise ValidationError(f"cube at {job.cube_root} changed since the job was created; refusing")
    model_path = Path(job.out_dir) / MODEL_FILE
    if not model_path.exists() or _sha256(model_path) != job.model_hash:
        raise ValidationError(f"model file {model_path} is missing or changed; refusing")
    return _run(job, max_retries, batch_rows, clean, on_chunk_done)
