"""Residual-vs-covariate heatmaps, Fn-Fn curves and the LOWESS smoother."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import special

from .core import RngStream
from .residuals import CLIP_EPS, FunctionalResidual, average_curve, point_summary

__all__ = [
    "HeatmapGrid",
    "FnFnCurve",
    "LowessFit",
    "heatmap",
    "fnfn",
    "subgroup_fnfn",
    "lowess",
    "lowess_range",
    "binned_mean_deviation",
    "discrete_edges",
    "NORMAL_WINDOW",
    "RESIDUAL_LOWESS_ITERS",
    "lowess_of_residuals",
]

NORMAL_WINDOW = (-3.5, 3.5)

# Bisquare reweighting treats the rare large residuals of a skewed discrete
# outcome as outliers and drags the curve toward the mode, so residual
# trend summaries use the plain local-linear fit.
RESIDUAL_LOWESS_ITERS = 0


@dataclass(frozen=True)
class FnFnCurve:
    t: NDArray
    resbar: NDArray
    sup_dev: float
    n: int
    subgroup: str | None = None

    def __call__(self, t: ArrayLike) -> NDArray:
        return np.interp(t, self.t, self.resbar)


@dataclass(frozen=True)
class HeatmapGrid:
    """Residual mass per (covariate bin, residual bin).

    ``mass[i, j]`` is the summed probability that the residuals of the
    observations in covariate bin ``i`` put on residual bin ``j``.
    """

    x_edges: NDArray
    y_edges: NDArray
    mass: NDArray
    scale: str
    counts: NDArray

    @property
    def x_centers(self) -> NDArray:
        return 0.5 * (self.x_edges[:-1] + self.x_edges[1:])

    @property
    def y_centers(self) -> NDArray:
        return 0.5 * (self.y_edges[:-1] + self.y_edges[1:])

    def column_means(self) -> NDArray:
        """Mass-weighted mean residual position per covariate bin (NaN for empty bins)."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return (self.mass @ self.y_centers) / self.mass.sum(axis=1)


@dataclass(frozen=True)
class LowessFit:
    x: NDArray
    fitted: NDArray
    span: float
    robustness_iters: int

    @property
    def range(self) -> float:
        return float(np.max(self.fitted) - np.min(self.fitted))


# ------------------------------------------------------------------ #
# Fn-Fn
# ------------------------------------------------------------------ #


def fnfn(res: FunctionalResidual, subgroup: str | None = None) -> FnFnCurve:
    """Averaged residual CDF against the identity.

    ``sup_dev`` is taken over all knots of the exact piecewise-linear curve,
    which is where ``|Res(t) - t|`` attains its supremum.
    """
    curve = average_curve(res)
    dev = float(np.max(np.abs(curve.values - curve.knots)))
    return FnFnCurve(curve.knots, curve.values, dev, len(res), subgroup)


def subgroup_fnfn(
    res: FunctionalResidual, mask: ArrayLike, description: str = "subgroup"
) -> FnFnCurve:
    """Fn-Fn curve of the residuals selected by ``mask``.

    ``mask`` is aligned either with the residuals or with the original data
    rows (then it is looked up through ``res.index``).
    """
    mask = np.asarray(mask, dtype=bool)
    if len(mask) != len(res):
        mask = mask[res.index]
    if not mask.any():
        raise ValueError("subgroup is empty")
    return fnfn(res[mask], subgroup=description)


# ------------------------------------------------------------------ #
# Heatmap
# ------------------------------------------------------------------ #


def _aligned(res: FunctionalResidual, covariate: ArrayLike) -> NDArray:
    x = np.asarray(covariate, dtype=float)
    if len(x) == len(res):
        return x
    if len(x) > res.index.max():
        return x[res.index]
    raise ValueError("covariate is not aligned with the residuals")


def heatmap(
    res: FunctionalResidual,
    covariate: ArrayLike,
    scale: str = "normal",
    x_bins: int = 100,
    y_bins: int = 100,
    y_range: tuple[float, float] | None = None,
    x_edges: ArrayLike | None = None,
) -> HeatmapGrid:
    """Deposit each residual's interval mass into a covariate-by-residual grid.

    Mass is integrated analytically: on the uniform scale a residual puts
    ``|bin ∩ (lo, hi)| / (hi - lo)`` into each bin, on the normal scale the
    same fraction after mapping bin edges through ``Phi``. Mass outside the
    display window goes into the edge bins, so every column sums to the
    number of observations in that covariate bin. ``x_edges`` overrides the
    equal-width covariate bins (see :func:`discrete_edges`).
    """
    x = _aligned(res, covariate)
    if scale == "uniform":
        y_edges = np.linspace(*(y_range or (0.0, 1.0)), y_bins + 1)
        t_edges = y_edges.copy()
    elif scale == "normal":
        y_edges = np.linspace(*(y_range or NORMAL_WINDOW), y_bins + 1)
        t_edges = special.ndtr(y_edges)
    else:
        raise ValueError("scale must be 'uniform' or 'normal'")
    t_edges[0], t_edges[-1] = 0.0, 1.0

    x_min, x_max = float(x.min()), float(x.max())
    if x_edges is not None:
        x_edges = np.asarray(x_edges, dtype=float)
        if x_edges.ndim != 1 or len(x_edges) < 2 or np.any(np.diff(x_edges) <= 0):
            raise ValueError("x_edges must be a strictly increasing vector of length >= 2")
    elif x_max <= x_min:
        x_edges = np.array([x_min - 0.5, x_min + 0.5])
    else:
        x_edges = np.linspace(x_min, x_max, x_bins + 1)
    nx = len(x_edges) - 1
    xbin = np.clip(np.searchsorted(x_edges, x, side="right") - 1, 0, nx - 1)

    mass = np.zeros((nx, y_bins))
    step = max(1, 2_000_000 // y_bins)
    for s in range(0, len(res), step):
        lo = res.lo[s : s + step, None]
        hi = res.hi[s : s + step, None]
        overlap = np.minimum(hi, t_edges[None, 1:]) - np.maximum(lo, t_edges[None, :-1])
        frac = np.clip(overlap, 0.0, None) / (hi - lo)
        np.add.at(mass, xbin[s : s + step], frac)
    counts = np.bincount(xbin, minlength=nx)
    return HeatmapGrid(x_edges, y_edges, mass, scale, counts)


def discrete_edges(x: ArrayLike, max_values: int = 50) -> NDArray | None:
    """Bin edges centred on each distinct value when there are at most ``max_values`` of them."""
    u = np.unique(np.asarray(x, dtype=float))
    if len(u) > max_values:
        return None
    if len(u) == 1:
        return np.array([u[0] - 0.5, u[0] + 0.5])
    mid = 0.5 * (u[1:] + u[:-1])
    return np.concatenate([[u[0] - (mid[0] - u[0])], mid, [u[-1] + (u[-1] - mid[-1])]])


def binned_mean_deviation(
    x: ArrayLike, v: ArrayLike, bins: int = 10, min_count: int = 30
) -> float:
    """Largest ``|mean(v)|`` over equal-width covariate bins holding at least ``min_count`` points."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    edges = np.linspace(x.min(), x.max(), bins + 1)
    idx = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, bins - 1)
    cnt = np.bincount(idx, minlength=bins)
    sums = np.bincount(idx, weights=v, minlength=bins)
    ok = cnt >= min_count
    if not ok.any():
        return 0.0
    return float(np.max(np.abs(sums[ok] / cnt[ok])))


# ------------------------------------------------------------------ #
# LOWESS
# ------------------------------------------------------------------ #


def _tricube(u: NDArray) -> NDArray:
    u = np.clip(np.abs(u), 0.0, 1.0)
    return (1.0 - u**3) ** 3


def _lowess_plan(xs: NDArray, k: int, delta: float):
    """Fit positions and neighbourhood windows, following R's ``clowess``.

    The window holds ``k`` consecutive sorted points and slides right while
    that shrinks its radius. After a fit at ``i`` the next fit is at the last
    point within ``x_i + delta`` (ties with ``x_i`` share its fit). Returns
    the fit indices plus each window's left end and radius.
    """
    n = len(xs)
    fits, lefts, radii = [], [], []
    nleft, nright = 0, k - 1
    i = 0
    while True:
        while nright < n - 1 and xs[i] - xs[nleft] > xs[nright + 1] - xs[i]:
            nleft += 1
            nright += 1
        fits.append(i)
        lefts.append(nleft)
        radii.append(max(xs[i] - xs[nleft], xs[nright] - xs[i]))
        last = i
        cut = xs[last] + delta
        j = last + 1
        while j < n and xs[j] <= cut:
            if xs[j] == xs[last]:
                last = j
            j += 1
        if last >= n - 1:
            break
        i = max(last + 1, j - 1)
    return np.asarray(fits), np.asarray(lefts), np.asarray(radii, dtype=float)


def _local_linear(xs, ys, fits, lefts, radii, robust, chunk=256):
    """Tricube-weighted local linear fits at ``xs[fits]`` (R's ``lowest``)."""
    n = len(xs)
    span_x = xs[-1] - xs[0]
    out = np.empty(len(fits))
    idx = np.arange(n)
    for s in range(0, len(fits), chunk):
        a = fits[s : s + chunk]
        x0 = xs[a][:, None]
        h = radii[s : s + chunk][:, None]
        d = np.abs(xs[None, :] - x0)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(h > 0, d / h, 0.0)
        # weights from the window's left end rightwards, zero beyond 0.999 h
        inside = (idx[None, :] >= lefts[s : s + chunk][:, None]) & (d <= 0.999 * h)
        w = np.where(r <= 0.001, 1.0, _tricube(r)) * inside * robust[None, :]
        sw = w.sum(axis=1)
        ok = sw > 0
        w = w / np.where(ok, sw, 1.0)[:, None]
        xbar = w @ xs
        dx = xs[None, :] - xbar[:, None]
        c = np.einsum("ij,ij->i", w, dx * dx)
        slope_ok = (h[:, 0] > 0) & (np.sqrt(c) > 0.001 * span_x)
        b = np.where(slope_ok, (x0[:, 0] - xbar) / np.where(slope_ok, c, 1.0), 0.0)
        fit = np.einsum("ij,ij->i", w * (1.0 + b[:, None] * dx), ys[None, :])
        out[s : s + chunk] = np.where(ok, fit, ys[a])
    return out


def lowess(
    x: ArrayLike,
    v: ArrayLike,
    span: float = 2.0 / 3.0,
    iters: int = 3,
    delta: float | None = None,
) -> LowessFit:
    """Cleveland's robust locally weighted linear smoother (R ``lowess`` conventions).

    ``span`` is the fraction of points in each local window, ``iters`` the
    number of bisquare robustness reweightings. Fits are computed at points
    at least ``delta`` apart and linearly interpolated in between; the
    default ``delta`` is 1% of the x range.
    """
    if not 0.0 < span <= 1.0:
        raise ValueError("span must lie in (0, 1]")
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if x.shape != v.shape or x.ndim != 1:
        raise ValueError("x and v must be 1-D arrays of equal length")
    n = len(x)
    if n < 3:
        raise ValueError("lowess needs at least three points")
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], v[order]
    if xs[-1] <= xs[0]:
        raise ValueError("lowess needs x values that are not all identical")
    if delta is None:
        delta = 0.01 * (xs[-1] - xs[0])
    k = max(2, min(n, int(span * n + 1e-7)))

    fits, lefts, radii = _lowess_plan(xs, k, delta)
    robust = np.ones(n)
    fitted = ys.copy()
    for it in range(iters + 1):
        at = _local_linear(xs, ys, fits, lefts, radii, robust)
        fitted = np.interp(xs, xs[fits], at)
        if it == iters:
            break
        resid = np.abs(ys - fitted)
        cmad = 6.0 * np.median(resid)
        if cmad < 1e-7 * resid.mean():
            break
        u = resid / cmad if cmad > 0 else np.zeros(n)
        robust = np.where(u <= 0.001, 1.0, np.where(u <= 0.999, (1.0 - u**2) ** 2, 0.0))
    return LowessFit(xs, fitted, span, iters)


def lowess_range(x: ArrayLike, v: ArrayLike, span: float = 2.0 / 3.0, iters: int = 3) -> float:
    """Max minus min of the LOWESS curve, the trend statistic used in the simulations."""
    return lowess(x, v, span, iters).range


def lowess_of_residuals(
    res: FunctionalResidual,
    covariate: ArrayLike,
    scale: str = "normal",
    span: float = 2.0 / 3.0,
    iters: int = RESIDUAL_LOWESS_ITERS,
    stream: RngStream | None = None,
) -> LowessFit:
    """LOWESS of the point summaries against a covariate (the overlay drawn on heatmaps).

    With ``stream`` given, each residual contributes one random draw from its
    interval (mapped to the display scale) instead of its expectation.
    """
    x = _aligned(res, covariate)
    if stream is None:
        v = point_summary(res, scale)
    else:
        if scale not in ("uniform", "normal"):
            raise ValueError("scale must be 'uniform' or 'normal'")
        v = res.lo + (res.hi - res.lo) * stream.uniform(size=len(res))
        if scale == "normal":
            v = special.ndtri(np.clip(v, CLIP_EPS, 1.0 - CLIP_EPS))
    return lowess(x, v, span=span, iters=iters)
