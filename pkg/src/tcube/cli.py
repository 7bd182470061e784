"""Command-line front end: one subcommand per workflow step.

Every command reads its inputs from files and writes its outputs to files,
so steps can be run independently.  Exit status is 0 on success, 1 for bad
input and 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .assess import accuracy_area, confusion, kfold_validate, load_references, map_areas
from .catalog import filter_items, parse_catalog
from .cube import CUBE_FORMAT_VERSION, build_timeline, load_cube, regularize
from .engine import JOB_FORMAT_VERSION, classify_cube, load_probs, plan_chunks, resume
from .errors import JobFailedError, TcubeError, ValidationError
from .models import load_model, model_kinds, save_model, train
from .models.base import MODEL_FORMAT_VERSION
from .quality import export_evaluation, som_evaluate, som_export, som_train
from .samples import get_data, load_samples, load_table, save_table
from .smooth import SmoothParams, bayes_smooth, label_map, load_label_map
from .synth import generate_cube, load_spec

log = logging.getLogger("tcube")

_MEM_UNITS = {"": 1, "K": 2**10, "M": 2**20, "G": 2**30, "T": 2**40}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def parse_memory(text: str) -> int:
    m = re.fullmatch(r"\s*(\d+(?:\.\d+)?)\s*([KMGT]?)i?B?\s*", str(text), re.IGNORECASE)
    if not m:
        raise ValidationError(f"--memory: cannot parse {text!r} (use e.g. 512M or 4G)")
    return int(float(m.group(1)) * _MEM_UNITS[m.group(2).upper()])


def parse_date(text: str, flag: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text)
    except (TypeError, ValueError):
        raise ValidationError(f"{flag}: expected YYYY-MM-DD, got {text!r}") from None


def parse_hyper(pairs) -> dict:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ValidationError(f"--hyper: expected key=value, got {item!r}")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def _need(args, *names):
    for name in names:
        if getattr(args, name, None) in (None, ""):
            raise ValidationError(f"missing required option --{name.replace('_', '-')}")


def _csv_list(text):
    return [s.strip() for s in text.split(",") if s.strip()] if text else None


# -- commands ------------------------------------------------------------------

def cmd_cube(args) -> dict:
    _need(args, "catalog", "start", "end", "out")
    c = parse_catalog(args.catalog)
    roi = [float(v) for v in _csv_list(args.roi)] if args.roi else None
    start, end = parse_date(args.start, "--start"), parse_date(args.end, "--end")
    c = filter_items(c, _csv_list(args.tiles), roi, start, end)
    if args.bands:
        wanted = _csv_list(args.bands)
        unknown = sorted(set(wanted) - set(c.band_names))
        if unknown:
            raise ValidationError(f"--bands: unknown band(s) {unknown}; catalog has {c.band_names}")
        c = replace(c, bands=tuple(b for b in c.bands if b.name in wanted or b.is_cloud_mask))
    timeline = build_timeline(start, end, args.period)
    cube = regularize(c, timeline, args.out, workers=args.cores)
    return {"cube": cube.storage_root, "tiles": [g.tile for g in cube.tiles],
            "bands": cube.band_names, "instants": len(timeline),
            "filled_pixel_count": cube.filled_pixel_count}


def cmd_get_data(args) -> dict:
    _need(args, "cube", "samples", "out")
    t = get_data(load_cube(args.cube), load_samples(args.samples), workers=args.cores)
    save_table(t, args.out)
    return {"table": str(args.out), "n_samples": len(t), "dropped": t.dropped,
            "n_outside": t.n_outside, "n_rejected": t.n_rejected}


def cmd_som(args) -> dict:
    _need(args, "table", "out")
    t = load_table(args.table)
    g = som_train(t, args.width, args.height, args.epochs, args.seed)
    evals = som_evaluate(g, t, args.purity)
    files = som_export(g, args.out)
    export_evaluation(evals, Path(args.out) / "som_eval.csv")
    counts = {s: sum(e.status == s for e in evals) for s in ("clean", "analyze", "remove")}
    return {"width": g.width, "height": g.height, "files": [str(f) for f in files]
            + [str(Path(args.out) / "som_eval.csv")], "status_counts": counts}


def cmd_train(args) -> dict:
    _need(args, "table", "out")
    t = load_table(args.table)
    m = train(t, args.method, parse_hyper(args.hyper), args.seed)
    save_model(m, args.out)
    return {"model": str(args.out), "kind": m.kind, "labels": list(m.labels),
            "n_samples": len(t), "hyperparams": m.hyper}


def cmd_classify(args) -> dict:
    _need(args, "out")
    job_file = Path(args.out) / "job.json"
    if args.resume and job_file.exists():
        probs, job = resume(args.out, max_retries=args.retries, clean=args.clean)
    else:
        if args.resume:
            log.info("no job in %s; starting a new one", args.out)
        _need(args, "cube", "model")
        cube = load_cube(args.cube)
        model = load_model(args.model)
        plan = plan_chunks(cube, parse_memory(args.memory), args.cores, len(model.labels),
                           args.strip_rows)
        probs, job = classify_cube(cube, model, plan, args.out, max_retries=args.retries,
                                   clean=args.clean)
    return {"probs": probs.root, "job_id": job.job_id, "labels": list(probs.labels),
            "chunks": len(job.plan.chunks), "chunks_run": len(job.executed),
            "noop": len(job.executed) == 0}


def cmd_smooth(args) -> dict:
    _need(args, "probs", "out")
    params = SmoothParams(args.window, args.sigma, args.eps)
    out = bayes_smooth(load_probs(args.probs), params, args.out, args.strip_rows, args.cores)
    return {"probs": out.root, "window": params.window, "sigma": params.sigma}


def cmd_label(args) -> dict:
    _need(args, "probs", "out")
    m = label_map(load_probs(args.probs), args.out, ppm=not args.no_ppm)
    counts = m.class_counts()
    return {"map": m.root, "legend": list(m.legend),
            "pixels": {lab: int(n) for lab, n in zip(m.legend, counts)}}


def cmd_kfold(args) -> dict:
    _need(args, "table")
    r = kfold_validate(load_table(args.table), args.k, args.method, parse_hyper(args.hyper),
                       args.seed)
    return r.to_dict()


def cmd_accuracy_area(args) -> dict:
    _need(args, "map", "refs")
    m = load_label_map(args.map)
    if args.areas:
        areas = np.array([float(v) for v in _csv_list(args.areas)])
    else:
        areas = map_areas(m)
    cm = confusion(m, load_references(args.refs))
    est = accuracy_area(cm, areas)
    result = {**est.to_dict(), "confusion": cm.to_dict(), "report": est.table()}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "accuracy.json").write_text(json.dumps(result, indent=1), encoding="utf-8")
        (out / "accuracy.txt").write_text(est.table() + "\n", encoding="utf-8")
    return result


def cmd_synth(args) -> dict:
    _need(args, "out")
    r = generate_cube(load_spec(args.spec), args.seed, args.out)
    return {"root": r.root, "catalog": r.catalog_path, "samples": r.samples_path,
            "reference": r.reference_path, "truth": r.truth.root, "cloud_pixels": r.cloud_pixels}


def _human(summary: dict) -> str:
    if isinstance(summary.get("report"), str):
        return summary["report"]
    return "\n".join(f"{k}: {v}" for k, v in summary.items())


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tcube", description="Satellite image time series classification on data cubes.")
    p.add_argument("--version", action="store_true", help="print versions and exit")
    p.add_argument("--json", action="store_true", help="print a JSON summary on stdout")
    p.add_argument("--config", help="flat JSON file of option defaults; flags take precedence")
    p.add_argument("-v", "--verbose", action="store_true")
    # the global flags are also accepted after the subcommand
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--json", action="store_true")
    common.add_argument("--config")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("cube", parents=[common], help="build a regular data cube from a catalog")
    s.add_argument("--catalog", help="catalog file, directory or http(s) URL")
    s.add_argument("--tiles", help="comma-separated tile ids")
    s.add_argument("--roi", help="lon_min,lat_min,lon_max,lat_max")
    s.add_argument("--start")
    s.add_argument("--end")
    s.add_argument("--period", type=int, default=16, help="interval length in days")
    s.add_argument("--bands", help="comma-separated band subset")
    s.add_argument("--cores", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_cube)

    s = sub.add_parser("get-data", parents=[common], help="extract sample time series from a cube")
    s.add_argument("--cube")
    s.add_argument("--samples", help="CSV or GeoJSON of labelled points")
    s.add_argument("--cores", type=int, default=1)
    s.add_argument("--out", help="output table (CSV)")
    s.set_defaults(func=cmd_get_data)

    s = sub.add_parser("som", parents=[common], help="self-organizing map quality check of samples")
    s.add_argument("--table")
    s.add_argument("--width", type=int)
    s.add_argument("--height", type=int)
    s.add_argument("--epochs", type=int, default=50)
    s.add_argument("--purity", type=float, default=0.6)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_som)

    s = sub.add_parser("train", parents=[common], help="train a classifier")
    s.add_argument("--table")
    s.add_argument("--method", choices=model_kinds(), default="rf")
    s.add_argument("--hyper", action="append", metavar="KEY=VALUE")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="model file")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("classify", parents=[common], help="classify a cube into per-class probabilities")
    s.add_argument("--cube")
    s.add_argument("--model")
    s.add_argument("--memory", default="1G")
    s.add_argument("--cores", type=int, default=1)
    s.add_argument("--strip-rows", type=int)
    s.add_argument("--retries", type=int, default=3)
    s.add_argument("--resume", action="store_true", help="finish an interrupted job in --out")
    s.add_argument("--clean", action="store_true", help="delete chunk files after merging")
    s.add_argument("--out", help="job directory")
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("smooth", parents=[common], help="Bayesian spatial smoothing of probabilities")
    s.add_argument("--probs")
    s.add_argument("--window", type=int, default=7)
    s.add_argument("--sigma", type=float, default=20.0, help="prior variance (sigma * identity)")
    s.add_argument("--eps", type=float, default=1e-4)
    s.add_argument("--strip-rows", type=int)
    s.add_argument("--cores", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_smooth)

    s = sub.add_parser("label", parents=[common], help="final label map from probabilities")
    s.add_argument("--probs")
    s.add_argument("--no-ppm", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_label)

    s = sub.add_parser("kfold", parents=[common], help="k-fold cross-validation of a model kind")
    s.add_argument("--table")
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--method", choices=model_kinds(), default="rf")
    s.add_argument("--hyper", action="append", metavar="KEY=VALUE")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_kfold)

    s = sub.add_parser("accuracy-area", parents=[common], help="area-weighted accuracy and adjusted areas")
    s.add_argument("--map")
    s.add_argument("--refs", help="CSV longitude,latitude,label")
    s.add_argument("--areas", help="comma-separated mapped area per class (default: from map)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_accuracy_area)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic scenario")
    s.add_argument("--spec", help="scenario JSON (defaults if omitted)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_synth)
    return p


def _subparsers(p: argparse.ArgumentParser) -> dict:
    for a in p._actions:
        if isinstance(a, argparse._SubParsersAction):
            return dict(a.choices)
    return {}


def apply_config(p: argparse.ArgumentParser, command: str, path: str) -> None:
    """Install config values as defaults of ``command``; unknown keys are rejected."""
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ValidationError(f"--config {path}: {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise ValidationError(f"--config {path}: malformed JSON ({e})") from e
    if not isinstance(cfg, dict):
        raise ValidationError(f"--config {path}: must be a flat JSON object")
    subs = _subparsers(p)
    known = {a.dest for s in subs.values() for a in s._actions} - {"help", "config", "json", "verbose"}
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise ValidationError(f"--config {path}: unknown key(s) {', '.join(unknown)}")
    nested = [k for k, v in cfg.items() if isinstance(v, dict)]
    if nested:
        raise ValidationError(f"--config {path}: values must be scalars or lists, not objects: {nested}")
    sub = subs[command]
    mine = {a.dest for a in sub._actions}
    sub.set_defaults(**{k: v for k, v in cfg.items() if k in mine})


def versions() -> dict:
    return {"tcube": __version__, "cube_format": CUBE_FORMAT_VERSION,
            "model_format": MODEL_FORMAT_VERSION, "job_format": JOB_FORMAT_VERSION}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    p = build_parser()
    try:
        args = p.parse_args(argv)
        if args.version:
            v = versions()
            print(json.dumps(v) if args.json else
                  " ".join(f"{k} {val}" for k, val in v.items()))
            return 0
        if not args.command:
            p.print_usage(sys.stderr)
            print("tcube: error: a command is required", file=sys.stderr)
            return 1
        if args.config:
            apply_config(p, args.command, args.config)
            args = p.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except ValidationError as e:
        print(f"tcube: error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = args.func(args)
    except ValidationError as e:
        print(f"tcube {args.command}: error: {e}", file=sys.stderr)
        return 1
    except JobFailedError as e:
        print(f"tcube {args.command}: failed: {e}", file=sys.stderr)
        print(f"the job is resumable: tcube classify --resume --out {e.job_dir}", file=sys.stderr)
        return 2
    except (TcubeError, OSError) as e:
        print(f"tcube {args.command}: failed: {e}", file=sys.stderr)
        return 2
    if args.json:
        print(json.dumps(summary, sort_keys=True, default=str))
    else:
        print(_human(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
