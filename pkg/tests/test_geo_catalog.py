import datetime as dt
import http.server
import json
import threading

import pytest
from hypothesis import given, strategies as st

from tcube.catalog import filter_items, parse_catalog, catalog_from_dict
from tcube.errors import CatalogError, EmptyResultError, OutsideExtentError
from tcube.geo import LonLatAffine, TileGrid, crs_to_pixel, lonlat_to_pixel


def _doc(**over):
    doc = {
        "id": "c", "crs": "local", "resolution": [10, 10],
        "bands": [{"name": "red", "dtype": "int16", "nodata": -9999},
                  {"name": "nir", "dtype": "int16", "nodata": -9999}],
        "items": [
            {"tile": "A", "datetime": "2020-01-05", "nrows": 4, "ncols": 4, "origin": [0, 40],
             "assets": {"red": "a_red_1.bin", "nir": "a_nir_1.bin"}},
            {"tile": "A", "datetime": "2020-01-01", "nrows": 4, "ncols": 4, "origin": [0, 40],
             "assets": {"red": "a_red_0.bin"}},
            {"tile": "B", "datetime": "2020-02-01", "nrows": 4, "ncols": 4, "origin": [40, 40],
             "assets": {"red": "b_red.bin"}},
        ],
    }
    doc.update(over)
    return doc


class TestGeo:
    grid = TileGrid("T", 4, 5, (100.0, 200.0), (10.0, 10.0))

    def test_pixel_center_maps_back(self):
        for r in range(4):
            for c in range(5):
                assert crs_to_pixel(self.grid, *self.grid.pixel_center(r, c)) == (r, c)

    def test_boundary_goes_to_lower_index(self):
        # x = 110 is the edge between columns 0 and 1, y = 190 between rows 0 and 1
        assert crs_to_pixel(self.grid, 110.0, 190.0) == (0, 0)
        assert crs_to_pixel(self.grid, 100.0, 200.0) == (0, 0)
        assert crs_to_pixel(self.grid, 150.0, 160.0) == (3, 4)

    def test_outside(self):
        with pytest.raises(OutsideExtentError):
            crs_to_pixel(self.grid, 99.0, 195.0)
        with pytest.raises(OutsideExtentError):
            crs_to_pixel(self.grid, 120.0, 159.0)

    @given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3),
           st.floats(0.1, 10), st.floats(-1, 1), st.floats(-1, 1), st.floats(0.1, 10))
    def test_affine_round_trip(self, x, y, b, c, e, f):
        if abs(b * f - c * e) < 1e-2:
            return
        aff = LonLatAffine((1.5, b, c, -2.0, e, f))
        lon, lat = aff.to_lonlat(x, y)
        x2, y2 = aff.to_crs(lon, lat)
        assert x2 == pytest.approx(x, abs=1e-6)
        assert y2 == pytest.approx(y, abs=1e-6)

    def test_lonlat_lookup_through_affine(self):
        aff = LonLatAffine((-50.0, 1e-4, 0.0, -10.0, 0.0, 1e-4))
        lon, lat = aff.to_lonlat(*self.grid.pixel_center(2, 3))
        assert lonlat_to_pixel(self.grid, aff, lon, lat) == (2, 3)

    def test_singular_affine_rejected(self):
        with pytest.raises(ValueError):
            LonLatAffine((0, 1, 1, 0, 1, 1))


class TestCatalog:
    def test_parse_sorts_and_resolves(self, tmp_path):
        path = tmp_path / "catalog.json"
        path.write_text(json.dumps(_doc()))
        c = parse_catalog(tmp_path)
        assert [(i.tile, i.datetime) for i in c.items] == [
            ("A", dt.date(2020, 1, 1)), ("A", dt.date(2020, 1, 5)), ("B", dt.date(2020, 2, 1))]
        assert c.items[0].assets["red"] == str(tmp_path / "a_red_0.bin")
        assert c.tiles == ["A", "B"]
        assert c.tile_grid("B").origin == (40.0, 40.0)

    def test_unknown_band(self):
        doc = _doc()
        doc["items"][0]["assets"]["swir"] = "x.bin"
        with pytest.raises(CatalogError, match="unknown band 'swir'"):
            catalog_from_dict(doc)

    def test_duplicate_asset(self):
        doc = _doc()
        doc["items"].append(dict(doc["items"][0]))
        with pytest.raises(CatalogError, match="duplicate"):
            catalog_from_dict(doc)

    @pytest.mark.parametrize("bad", ["2020-1-5", "2020-01-05T00:00:00Z", "2020-02-30", 20200105])
    def test_strict_dates(self, bad):
        doc = _doc()
        doc["items"][0]["datetime"] = bad
        with pytest.raises(CatalogError):
            catalog_from_dict(doc)

    def test_bad_cloud_cover(self):
        doc = _doc()
        doc["items"][0]["cloud_cover"] = 150
        with pytest.raises(CatalogError, match="cloud_cover"):
            catalog_from_dict(doc)

    def test_missing_file_and_bad_json(self, tmp_path):
        with pytest.raises(CatalogError, match="cannot read"):
            parse_catalog(tmp_path / "nope.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(CatalogError, match="malformed JSON"):
            parse_catalog(bad)

    def test_filter_by_tile_date_roi(self):
        c = catalog_from_dict(_doc())
        assert [i.tile for i in filter_items(c, tiles=["B"]).items] == ["B"]
        sel = filter_items(c, start=dt.date(2020, 1, 2), end=dt.date(2020, 1, 31))
        assert [i.datetime for i in sel.items] == [dt.date(2020, 1, 5)]
        # identity affine: tile A spans x 0..40, tile B 40..80
        assert set(filter_items(c, roi=(50, 10, 60, 20)).tiles) == {"B"}
        assert set(filter_items(c, roi=(0, 0, 80, 40)).tiles) == {"A", "B"}

    def test_filter_empty_result(self):
        c = catalog_from_dict(_doc())
        with pytest.raises(EmptyResultError, match="no items"):
            filter_items(c, tiles=["Z"])
        with pytest.raises(EmptyResultError):
            filter_items(c, start=dt.date(2021, 1, 1))

    def test_inconsistent_grid(self):
        doc = _doc()
        doc["items"][1]["nrows"] = 5
        c = catalog_from_dict(doc)
        with pytest.raises(CatalogError, match="do not share one grid"):
            c.tile_grid("A")


class _Handler(http.server.BaseHTTPRequestHandler):
    body = b""
    hops = 0

    def do_GET(self):
        if self.path.startswith("/hop"):
            n = int(self.path[4:])
            self.send_response(302)
            self.send_header("Location", f"/hop{n - 1}" if n > 1 else "/catalog.json")
            self.end_headers()
        elif self.path == "/catalog.json":
            self.send_response(200)
            self.end_headers()
            self.wfile.write(self.body)
        else:
            self.send_response(404)
            self.end_headers()

    def log_message(self, *args):
        pass


@pytest.fixture
def http_server():
    _Handler.body = json.dumps(_doc()).encode()
    srv = http.server.HTTPServer(("127.0.0.1", 0), _Handler)
    th = threading.Thread(target=srv.serve_forever, daemon=True)
    th.start()
    yield f"http://127.0.0.1:{srv.server_address[1]}"
    srv.shutdown()


class TestHttp:
    def test_plain_get(self, http_server):
        c = parse_catalog(http_server + "/catalog.json")
        assert len(c.items) == 3
        assert c.items[0].assets["red"] == http_server + "/a_red_0.bin"

    def test_redirects_up_to_five(self, http_server):
        assert len(parse_catalog(http_server + "/hop5").items) == 3
        with pytest.raises(CatalogError):
            parse_catalog(http_server + "/hop6")

    def test_404(self, http_server):
        with pytest.raises(CatalogError, match="HTTP 404"):
            parse_catalog(http_server + "/missing.json")
