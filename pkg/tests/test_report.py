import io
import json
import os

import numpy as np
import pytest
from matplotlib import image as mpimg

from ensboost.report import (Curve, EvalReport, Histogram, Map, Scalar, read_report,
                             render_map_png, write_report)


def sample_report():
    r = np.random.default_rng(0)
    rep = EvalReport(provenance={"note": "x", "years": [2000, 2010]})
    rep.add("curve_a", Curve(r.standard_normal(7), r.standard_normal(7)))
    rep.add("hist_a", Histogram(np.linspace(-1, 1, 6), r.random(5)))
    rep.add("map_a", Map(r.standard_normal((3, 4)), [-30.0, 0.0, 30.0], [0, 90, 180, 270]))
    rep.add("scalar_a", Scalar(1.0 / 3.0))
    return rep


def test_round_trip_exact(tmp_path):
    rep = sample_report()
    write_report(rep, tmp_path / "r")
    back = read_report(tmp_path / "r")
    assert back.names() == rep.names()
    assert back.provenance == rep.provenance
    for name, e in rep.entries.items():
        b = back[name]
        assert b.kind == e.kind
        for attr in ("x", "y", "edges", "density", "values", "lat", "lon"):
            if hasattr(e, attr):
                assert np.array_equal(getattr(b, attr), getattr(e, attr))
    assert back["scalar_a"].value == 1.0 / 3.0


def test_manifest_lists_each_entry_once(tmp_path):
    rep = sample_report()
    write_report(rep, tmp_path / "r")
    manifest = json.loads((tmp_path / "r" / "manifest.json").read_text())
    names = [e["name"] for e in manifest["entries"]]
    assert sorted(names) == sorted(rep.names()) and len(set(names)) == len(names)
    for e in manifest["entries"]:
        assert os.path.exists(tmp_path / "r" / e["file"])
    assert os.path.exists(tmp_path / "r" / "maps" / "map_a.png")


def test_map_csv_layout(tmp_path):
    rep = EvalReport()
    rep.add("m", Map([[1.0, 2.0]], [10.0], [0.0, 5.0]))
    write_report(rep, tmp_path, map_pngs=False)
    assert (tmp_path / "m.csv").read_text().splitlines() == ["lat\\lon,0.0,5.0",
                                                              "10.0,1.0,2.0"]


def test_duplicate_and_unsafe_names():
    rep = EvalReport()
    rep.add("a", Scalar(1))
    with pytest.raises(ValueError):
        rep.add("a", Scalar(2))
    with pytest.raises(ValueError):
        rep.add("../x", Scalar(2))


def test_constant_map_png_is_single_colour():
    png = render_map_png(np.full((5, 7), 2.5))
    img = mpimg.imread(io.BytesIO(png), format="png")
    assert img.shape[:2] == (20, 28)
    flat = img.reshape(-1, img.shape[-1])
    assert len(np.unique(flat, axis=0)) == 1


def test_png_deterministic():
    m = np.random.default_rng(1).standard_normal((4, 6))
    assert render_map_png(m) == render_map_png(m)
    assert render_map_png(m) != render_map_png(m, color_scale=(-10, 10))
