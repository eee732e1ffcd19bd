"""Figure rendering for heatmaps, LOWESS overlays and Fn-Fn curves.

Every figure is written as SVG next to a CSV holding the numbers it shows.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from matplotlib.colors import LinearSegmentedColormap  # noqa: E402

from .diagnostics import FnFnCurve, HeatmapGrid, LowessFit  # noqa: E402

HEAT_CMAP = LinearSegmentedColormap.from_list("heat", ["#ffffff", "#f4a582", "#b2182b", "#3b0000"])

# deterministic SVG output (no random ids, no timestamps)
plt.rcParams["svg.hashsalt"] = "funcresid"
plt.rcParams["svg.fonttype"] = "none"
_SVG_META = {"Date": None}


def _base(path: str | Path) -> Path:
    """Strip a trailing .svg/.csv only; dots inside names (``free.sulfur``) are kept."""
    path = Path(path)
    return path.with_suffix("") if path.suffix.lower() in (".svg", ".csv") else path


def _with(base: Path, tail: str) -> Path:
    return base.parent / f"{base.name}{tail}"


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    # the cell mesh is embedded as a 200 dpi PNG; axes and text stay vector
    fig.savefig(path, format="svg", metadata=_SVG_META, bbox_inches="tight", dpi=200)
    plt.close(fig)
    return path


def heatmap_axes(ax, grid: HeatmapGrid, smooth: LowessFit | None = None, xlabel: str = "x"):
    mesh = ax.pcolormesh(
        grid.x_edges, grid.y_edges, grid.mass.T, cmap=HEAT_CMAP, shading="flat", rasterized=True
    )
    center = 0.0 if grid.scale == "normal" else 0.5
    ax.axhline(center, color="0.3", ls="--", lw=1)
    if smooth is not None:
        ax.plot(smooth.x, smooth.fitted, color="#2166ac", lw=2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("functional residual" + (" (normal scale)" if grid.scale == "normal" else ""))
    ax.set_ylim(grid.y_edges[0], grid.y_edges[-1])
    return mesh


def plot_heatmap(
    grid: HeatmapGrid,
    path: str | Path,
    smooth: LowessFit | None = None,
    xlabel: str = "x",
    title: str | None = None,
) -> dict[str, Path]:
    """Write ``<path>.svg`` plus ``<path>_grid.csv`` (and ``<path>_lowess.csv``)."""
    base = _base(path)
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    mesh = heatmap_axes(ax, grid, smooth, xlabel)
    fig.colorbar(mesh, ax=ax, label="residual mass")
    if title:
        ax.set_title(title)
    out = {"figure": _save(fig, _with(base, ".svg"))}
    out["grid"] = write_heatmap_csv(grid, _with(base, "_grid.csv"))
    if smooth is not None:
        out["lowess"] = _with(base, "_lowess.csv")
        pd.DataFrame({"x": smooth.x, "fitted": smooth.fitted}).to_csv(out["lowess"], index=False)
    return out


def write_heatmap_csv(grid: HeatmapGrid, path: Path) -> Path:
    nx, ny = grid.mass.shape
    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    frame = pd.DataFrame(
        {
            "x_lo": grid.x_edges[ix.ravel()],
            "x_hi": grid.x_edges[ix.ravel() + 1],
            "y_lo": grid.y_edges[iy.ravel()],
            "y_hi": grid.y_edges[iy.ravel() + 1],
            "mass": grid.mass.ravel(),
        }
    )
    frame.to_csv(path, index=False)
    return path


def fnfn_axes(ax, curves: Sequence[FnFnCurve], labels: Sequence[str] | None = None):
    ax.plot([0, 1], [0, 1], color="0.4", ls="--", lw=1)
    for i, c in enumerate(curves):
        lab = labels[i] if labels else (c.subgroup or None)
        ax.plot(c.t, c.resbar, lw=1.8, label=lab)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_aspect("equal")
    ax.set_xlabel("t")
    ax.set_ylabel("average functional residual")
    if labels or any(c.subgroup for c in curves):
        ax.legend(loc="upper left", frameon=False)


def plot_fnfn(
    curves: FnFnCurve | Sequence[FnFnCurve],
    path: str | Path,
    labels: Sequence[str] | None = None,
    title: str | None = None,
) -> dict[str, Path]:
    """Write ``<path>.svg`` and ``<path>.csv`` with one (t, resbar) block per curve."""
    if isinstance(curves, FnFnCurve):
        curves = [curves]
    base = _base(path)
    fig, ax = plt.subplots(figsize=(4.2, 4.2))
    fnfn_axes(ax, curves, labels)
    if title:
        ax.set_title(title)
    out = {"figure": _save(fig, _with(base, ".svg"))}
    frames = []
    for i, c in enumerate(curves):
        name = labels[i] if labels else (c.subgroup or f"curve{i}")
        frames.append(pd.DataFrame({"curve": name, "t": c.t, "resbar": c.resbar}))
    out["curve"] = _with(base, ".csv")
    pd.concat(frames).to_csv(out["curve"], index=False, float_format="%.17g")
    return out
