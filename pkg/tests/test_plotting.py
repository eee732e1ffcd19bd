from __future__ import annotations

import xml.etree.ElementTree as ET

import numpy as np
import pandas as pd
import pytest

from funcresid.diagnostics import fnfn, heatmap, lowess
from funcresid.plotting import plot_fnfn, plot_heatmap
from funcresid.residuals import FunctionalResidual


@pytest.fixture
def residuals():
    lo = np.array([0.0, 0.1, 0.3, 0.5, 0.55, 0.8])
    hi = np.array([0.4, 0.2, 0.9, 1.0, 0.6, 0.95])
    x = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    return FunctionalResidual(lo, hi), x


def _is_svg(path):
    root = ET.parse(path).getroot()
    return root.tag.endswith("svg")


def test_fnfn_svg_and_csv(tmp_path, residuals):
    res, _ = residuals
    curve = fnfn(res)
    out = plot_fnfn(curve, tmp_path / "fnfn")
    assert _is_svg(out["figure"])
    table = pd.read_csv(out["curve"], float_precision="round_trip")
    assert list(table.columns) == ["curve", "t", "resbar"]
    # the CSV holds exactly the plotted knots, at full precision
    np.testing.assert_array_equal(table["t"].to_numpy(), curve.t)
    np.testing.assert_array_equal(table["resbar"].to_numpy(), curve.resbar)


def test_fnfn_multiple_curves_labelled(tmp_path, residuals):
    res, _ = residuals
    a, b = fnfn(res), fnfn(FunctionalResidual(res.lo[:3], res.hi[:3]))
    out = plot_fnfn([a, b], tmp_path / "two", labels=["all", "first"])
    table = pd.read_csv(out["curve"])
    assert set(table["curve"]) == {"all", "first"}
    assert (table["curve"] == "first").sum() == len(b.t)


def test_heatmap_svg_and_grid_csv(tmp_path, residuals):
    res, x = residuals
    grid = heatmap(res, x, "uniform", x_bins=3, y_bins=4)
    smooth = lowess(x, res.lo + res.hi - 1.0, span=1.0, iters=0)
    out = plot_heatmap(grid, tmp_path / "hm", smooth, xlabel="x")
    assert _is_svg(out["figure"])
    cells = pd.read_csv(out["grid"])
    assert len(cells) == 3 * 4
    np.testing.assert_allclose(cells["mass"].to_numpy(), grid.mass.ravel())
    assert cells["mass"].sum() == pytest.approx(len(res))
    line = pd.read_csv(out["lowess"])
    np.testing.assert_allclose(line["fitted"].to_numpy(), smooth.fitted)


def test_heatmap_without_smooth_has_no_lowess_csv(tmp_path, residuals):
    res, x = residuals
    out = plot_heatmap(heatmap(res, x, "normal", x_bins=2, y_bins=5), tmp_path / "plain")
    assert "lowess" not in out
    assert not (tmp_path / "plain_lowess.csv").exists()


def test_dotted_names_are_kept(tmp_path, residuals):
    res, x = residuals
    grid = heatmap(res, x, "uniform", x_bins=2, y_bins=2)
    out = plot_heatmap(grid, tmp_path / "heatmap_free.sulfur.dioxide")
    assert out["figure"].name == "heatmap_free.sulfur.dioxide.svg"
    assert out["grid"].name == "heatmap_free.sulfur.dioxide_grid.csv"
    out = plot_fnfn(fnfn(res), tmp_path / "curve.svg")
    assert out["figure"].name == "curve.svg"
    assert out["curve"].name == "curve.csv"


def test_outputs_are_byte_identical(tmp_path, residuals):
    res, x = residuals
    grid = heatmap(res, x, "normal", x_bins=3, y_bins=6)
    smooth = lowess(x, res.lo, span=1.0, iters=0)
    first = plot_heatmap(grid, tmp_path / "a" / "hm", smooth, title="t")
    second = plot_heatmap(grid, tmp_path / "b" / "hm", smooth, title="t")
    for key in first:
        assert first[key].read_bytes() == second[key].read_bytes()
    f1 = plot_fnfn(fnfn(res), tmp_path / "a" / "c")
    f2 = plot_fnfn(fnfn(res), tmp_path / "b" / "c")
    assert f1["figure"].read_bytes() == f2["figure"].read_bytes()
