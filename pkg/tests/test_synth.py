import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tcube.cube import build_timeline, regularize
from tcube.errors import ValidationError
from tcube.synth import (NODATA, ScenarioSpec, Signature, block_layout, generate_cube,
                         interior_mask, load_spec)


def _tree(root):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _cube(r, out):
    spec = ScenarioSpec.from_dict(json.loads(Path(r.root, "scenario.json").read_text()))
    import datetime as dt
    tl = build_timeline(dt.date.fromisoformat(spec.start), dt.date.fromisoformat(spec.end),
                        spec.period_days)
    return regularize(r.collection, tl, out)


def test_default_scenario_counts(tmp_path):
    r = generate_cube(ScenarioSpec(), seed=1, out=tmp_path)
    items = r.collection.items
    assert len(items) == 23
    assert sum(len(it.assets) for it in items) == 46
    assert len(list((tmp_path / "raw" / "T01").glob("*.bin"))) == 46
    assert r.collection.band_names == ["ndvi", "evi"]
    truth = r.truth.read("T01")
    assert truth.shape == (64, 64) and set(np.unique(truth)) == {0, 1, 2}
    rows = (tmp_path / "samples.csv").read_text().splitlines()
    assert rows[0] == "longitude,latitude,start_date,end_date,label" and len(rows) == 301
    labels = [line.rsplit(",", 1)[1] for line in rows[1:]]
    assert {lab: labels.count(lab) for lab in set(labels)} == {"crop": 100, "forest": 100, "pasture": 100}


def test_same_seed_byte_identical(tmp_path):
    spec = ScenarioSpec(nrows=24, ncols=20, block=8, n_samples=30, n_reference=30)
    a = generate_cube(spec, 5, tmp_path / "a")
    b = generate_cube(spec, 5, tmp_path / "b")
    ta, tb = _tree(a.root), _tree(b.root)
    ta.pop("truth/map.json"), tb.pop("truth/map.json")
    assert ta == tb
    c = generate_cube(spec, 6, tmp_path / "c")
    assert _tree(c.root)["samples.csv"] != ta["samples.csv"]


def test_cloud_positions_reproducible(tmp_path):
    spec = ScenarioSpec(nrows=16, ncols=16, block=8, cloud_fraction=0.3, n_samples=12,
                        n_reference=12)
    masks = []
    for name in ("a", "b"):
        r = generate_cube(spec, 9, tmp_path / name)
        it = r.collection.items[4]
        raw = np.fromfile(it.assets["ndvi"], dtype="<i2")
        masks.append(raw == NODATA)
    assert np.array_equal(masks[0], masks[1]) and masks[0].any()
    assert 0.15 < masks[0].mean() < 0.45


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 12), st.integers(2, 5),
       st.integers(0, 1000))
def test_layout_partitions_tile(nrows, ncols, block, k, seed):
    spec = ScenarioSpec(classes=tuple(f"c{i}" for i in range(k)), nrows=nrows, ncols=ncols,
                        block=block)
    lay = block_layout(spec, np.random.default_rng(seed))
    assert lay.shape == (nrows, ncols)
    assert lay.min() >= 0 and lay.max() < k
    for r0 in range(0, nrows, block):
        for c0 in range(0, ncols, block):
            assert np.unique(lay[r0:r0 + block, c0:c0 + block]).size == 1


def test_interior_mask():
    truth = np.zeros((6, 6), dtype=int)
    truth[:, 3:] = 1
    m = interior_mask(truth, 1)
    assert m[:, [0, 1, 4, 5]].all() and not m[:, [2, 3]].any()


def test_separation_enforced(tmp_path):
    same = [[{"base": 0.3, "amplitude": 0.1, "phase": 0.0}]] * 2
    spec = ScenarioSpec(classes=("a", "b"), bands=("x",), signatures=same)
    with pytest.raises(ValidationError, match="apart"):
        generate_cube(ScenarioSpec.from_dict(spec.to_dict()), 0, tmp_path)


def test_cloud_free_regularization_is_identity(tmp_path):
    spec = ScenarioSpec(nrows=12, ncols=10, block=4, cloud_fraction=0.0, n_samples=12,
                        n_reference=12)
    r = generate_cube(spec, 3, tmp_path / "s")
    cube = _cube(r, tmp_path / "cube")
    assert cube.filled_pixel_count == 0
    for it, t in zip(r.collection.items, cube.timeline.instants):
        for band in spec.bands:
            raw = Path(it.assets[band]).read_bytes()
            assert cube.raster_path("T01", band, t).read_bytes() == raw


def test_cloud_mask_band(tmp_path):
    spec = ScenarioSpec(nrows=8, ncols=8, block=4, cloud_fraction=0.4, cloud_mask_band=True,
                        n_samples=6, n_reference=6)
    r = generate_cube(spec, 2, tmp_path / "s")
    assert r.collection.cloud_band.name == "cloud"
    assert sum(len(it.assets) for it in r.collection.items) == 23 * 3
    cube = _cube(r, tmp_path / "cube")
    assert cube.band_names == ["ndvi", "evi"]


def test_spec_round_trip_and_validation(tmp_path):
    spec = ScenarioSpec(nrows=10)
    assert ScenarioSpec.from_dict(spec.to_dict()).to_dict() == spec.to_dict()
    p = tmp_path / "s.json"
    p.write_text(json.dumps({"nrows": 20, "noise": 0.05}))
    got = load_spec(p, {"noise": 0.01})
    assert got.nrows == 20 and got.noise == 0.01
    with pytest.raises(ValidationError, match="bogus"):
        ScenarioSpec.from_dict({"bogus": 1})
    for bad in [dict(classes=("a",)), dict(cloud_fraction=1.0), dict(block=0), dict(noise=-1)]:
        with pytest.raises(ValidationError):
            ScenarioSpec(**bad)


def test_signature_order_matters():
    sig = Signature(0.3, 0.1, 0.0, pulse_height=0.2, pulse_center=0.2)
    s = np.linspace(0, 1, 23, endpoint=False)
    assert not np.allclose(sig(s), sig(s)[::-1])
