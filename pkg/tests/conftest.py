import datetime as dt
import warnings

import numpy as np
import pytest

from tcube.cube import Timeline, build_timeline, regularize
from tcube.samples import SamplePoint, TimeSeriesTable
from tcube.synth import ScenarioSpec, generate_cube

CRITERIA = {
    1: "end-to-end synthetic pipeline (OA >= 0.95, smoothing reduces interior errors, < 5 min)",
    2: "chunk equivalence: 1 chunk vs 7 chunks bit-identical",
    3: "crash-resume bit-identical for 3 chunk prefixes",
    4: "smoothing matches dense-solve oracle (1e-5); constant neighbourhood returns x (1e-6)",
    5: "logit values and clamping",
    6: "area estimator worked example and identities",
    7: "MLP / TempCNN gradient checks",
    8: "SOM BMU oracle, two pure neurons, determinism",
    9: "regularization: no nodata, gap fill, Meets",
    10: "k-fold folds and accuracy",
}

_outcomes: dict[int, list[bool]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _outcomes.setdefault(mark.args[0], []).append(rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, text in CRITERIA.items():
        results = _outcomes.get(n)
        if results is None:
            state = "NOT RUN"
        else:
            state = "PASS" if all(results) else "FAIL"
        tr.write_line(f"AC{n:<2} {state:<7} {text}")


# -- helpers ---------------------------------------------------------------------

def make_timeline(n, period=16, start=dt.date(2020, 1, 1)):
    return Timeline(tuple(start + dt.timedelta(days=period * k) for k in range(n)), period)


def make_table(series, labels, bands=None, cube_id="test"):
    series = np.asarray(series, dtype=np.float32)
    n, t, b = series.shape
    tl = make_timeline(t)
    end = tl.instants[-1]
    pts = [SamplePoint(float(i), 0.0, tl.instants[0], end, str(lab)) for i, lab in enumerate(labels)]
    return TimeSeriesTable(cube_id, list(bands or [f"b{j}" for j in range(b)]), tl, pts, series)


def separable_table(n_per_class=30, n_classes=3, t=6, b=2, seed=0, spread=0.05):
    rng = np.random.default_rng(seed)
    rows, labels = [], []
    for c in range(n_classes):
        rows.append(c + spread * rng.standard_normal((n_per_class, t, b)))
        labels += [f"class{c}"] * n_per_class
    return make_table(np.concatenate(rows), labels)


@pytest.fixture(autouse=True)
def _quiet_constant_bands():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="band .* is constant")
        yield


@pytest.fixture(scope="session")
def small_scenario(tmp_path_factory):
    """A 32x32 synthetic scenario with its regular cube."""
    root = tmp_path_factory.mktemp("small")
    spec = ScenarioSpec(nrows=32, ncols=32, block=8, n_samples=90, n_reference=100)
    r = generate_cube(spec, 7, root / "raw")
    tl = build_timeline(dt.date.fromisoformat(spec.start), dt.date.fromisoformat(spec.end),
                        spec.period_days)
    cube = regularize(r.collection, tl, root / "cube")
    return r, cube


def write_raw_catalog(root, observations, bands=None, resolution=1.0, origin=(0.0, 0.0),
                      affine=None):
    """Write rasters and a catalog.json; ``observations`` maps tile -> [(date, {band: array})]."""
    import json
    from pathlib import Path

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    bands = bands or [{"name": "b1", "dtype": "int16", "scale": 1.0, "nodata": -9999}]
    dtypes = {b["name"]: ("<i2" if b["dtype"] == "int16" else "<f4") for b in bands}
    items = []
    for tile, obs in observations.items():
        for date, arrays in obs:
            assets = {}
            for band, arr in arrays.items():
                arr = np.asarray(arr)
                name = f"{tile}_{band}_{date}.bin"
                (root / name).write_bytes(arr.astype(dtypes[band]).tobytes())
                assets[band] = name
            nrows, ncols = np.asarray(next(iter(arrays.values()))).shape
            items.append({"tile": tile, "datetime": str(date), "nrows": nrows, "ncols": ncols,
                          "origin": list(origin), "assets": assets})
    doc = {"id": "raw", "crs": "local", "resolution": [resolution, resolution], "bands": bands,
           "items": items}
    if affine is not None:
        doc["lonlat_affine"] = list(affine)
    (root / "catalog.json").write_text(json.dumps(doc))
    return root / "catalog.json"
