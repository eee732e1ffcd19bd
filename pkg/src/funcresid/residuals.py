"""Functional residuals.

For an observation ``(y, x)`` the functional residual is the CDF of the
uniform distribution on ``(F(y-1 | x), F(y | x))``, where ``F`` is the
fitted model's cumulative distribution. Everything here works on the interval
endpoints ``(lo, hi)``; the CDF, density, normal-scale view and point
summaries are derived from them.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import special

from .core import Dataset, RngStream, std_normal_pdf
from .models import FittedModel, inverse_link_quantile

__all__ = [
    "CLIP_EPS",
    "FunctionalResidual",
    "ResidualCurve",
    "functional_residual",
    "functional_residuals",
    "evaluate",
    "density",
    "density_normal_scale",
    "average_curve",
    "to_normal_scale",
    "surrogate_draw",
    "sign_residual",
    "point_summary",
    "pearson_residual",
    "deviance_residual",
    "residual_table",
    "UnsupportedFamilyError",
]

CLIP_EPS = 1e-10
_Z_MIN = float(special.ndtri(CLIP_EPS))
_Z_MAX = -_Z_MIN


class UnsupportedFamilyError(ValueError):
    pass


@dataclass(frozen=True)
class FunctionalResidual:
    """A batch of functional residuals, one uniform interval per row.

    ``index`` records the originating row of each interval so that subsets
    and exclusions can be traced back to the data.
    """

    lo: NDArray[np.float64]
    hi: NDArray[np.float64]
    index: NDArray[np.int64] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lo and hi must be 1-D arrays of equal length")
        if np.any(lo < 0) or np.any(hi > 1) or np.any(hi <= lo):
            raise ValueError("residual intervals must satisfy 0 <= lo < hi <= 1")
        idx = np.arange(len(lo)) if self.index is None else np.atleast_1d(self.index)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "index", np.asarray(idx, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.lo)

    def __getitem__(self, rows) -> FunctionalResidual:
        return FunctionalResidual(self.lo[rows], self.hi[rows], self.index[rows])

    @property
    def width(self) -> NDArray:
        return self.hi - self.lo

    def evaluate(self, t: ArrayLike) -> NDArray:
        return evaluate(self, t)


# ------------------------------------------------------------------ #
# Construction
# ------------------------------------------------------------------ #


def functional_residuals(
    model: FittedModel, data: Dataset, min_width: float = 0.0
) -> FunctionalResidual:
    """Residual intervals ``(F(y-1|x), F(y|x))`` for every row of ``data``.

    Rows whose interval collapses (``hi - lo <= min_width``) are treated as
    follows. If the model gives the outcome positive probability but the
    interval is below floating-point resolution (far tails), it is replaced
    by the narrowest representable interval at the same location. Rows that
    the model makes impossible, or that fall below a positive ``min_width``,
    are excluded with a warning; ``index`` identifies the retained rows.
    """
    if np.any(data.y > model.support_max):
        raise ValueError(f"outcomes exceed the model support (max {model.support_max})")
    lo = model.cdf(data.y - 1, data)
    hi = model.cdf(data.y, data)
    lo = np.clip(lo, 0.0, 1.0)
    hi = np.clip(hi, 0.0, 1.0)
    keep = np.ones(data.n, dtype=bool)
    bad = hi - lo <= min_width
    if np.any(bad):
        if min_width > 0:
            keep &= ~bad
        else:
            finite = _finite_predictors(model, data)
            snap = bad & finite
            upper = snap & (lo >= 0.5)
            lower = snap & ~upper
            lo[upper] = np.nextafter(hi[upper], -np.inf)
            hi[lower] = np.nextafter(lo[lower], np.inf)
            keep &= ~(bad & ~finite)
        dropped = int((~keep).sum())
        if dropped:
            warnings.warn(
                f"{dropped} observation(s) have (numerically) zero model probability "
                "and are excluded from the residuals",
                stacklevel=2,
            )
    rows = np.flatnonzero(keep)
    return FunctionalResidual(lo[rows], hi[rows], rows)


def _finite_predictors(model: FittedModel, data: Dataset) -> NDArray:
    ok = np.isfinite(model.linear_predictor(data))
    if model.zero_terms is not None:
        from .core import design_matrix

        ok &= np.isfinite(design_matrix(data, model.zero_terms) @ model.zero_beta)
    return ok


def functional_residual(model: FittedModel, y: int, x: ArrayLike) -> FunctionalResidual:
    """Residual interval for a single observation."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    data = Dataset(np.array([y]), x, model.names)
    return functional_residuals(model, data)


# ------------------------------------------------------------------ #
# Evaluations
# ------------------------------------------------------------------ #


def _broadcast(res: FunctionalResidual, t: ArrayLike):
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        return res.lo, res.hi, t
    return res.lo[:, None], res.hi[:, None], t[None, :]


def evaluate(res: FunctionalResidual, t: ArrayLike) -> NDArray:
    """Residual CDF ``clamp((t - lo) / (hi - lo), 0, 1)``.

    Scalar ``t`` gives one value per residual; a 1-D ``t`` gives an
    ``n x len(t)`` matrix.
    """
    lo, hi, t = _broadcast(res, t)
    with np.errstate(over="ignore", invalid="ignore"):
        out = (t - lo) / (hi - lo)
    return np.clip(np.nan_to_num(out, nan=0.0), 0.0, 1.0)


def density(res: FunctionalResidual, t: ArrayLike) -> NDArray:
    """Uniform-scale density: ``1 / (hi - lo)`` on ``(lo, hi]``."""
    lo, hi, t = _broadcast(res, t)
    return np.where((t > lo) & (t <= hi), 1.0 / (hi - lo), 0.0)


def density_normal_scale(res: FunctionalResidual, z: ArrayLike) -> NDArray:
    """Density of ``Phi^{-1}(U(lo, hi))``: ``phi(z) / (hi - lo)`` where ``Phi(z)`` is in ``(lo, hi]``."""
    lo, hi, z = _broadcast(res, z)
    t = special.ndtr(z)
    return np.where((t > lo) & (t <= hi), std_normal_pdf(z) / (hi - lo), 0.0)


def to_normal_scale(res: FunctionalResidual, eps: float = CLIP_EPS) -> tuple[NDArray, NDArray]:
    """Interval endpoints on the standard normal scale, clipped at ``eps``."""
    z_lo = special.ndtri(np.maximum(res.lo, eps))
    z_hi = special.ndtri(np.minimum(res.hi, 1.0 - eps))
    return z_lo, z_hi


def sign_residual(res: FunctionalResidual) -> NDArray:
    """``Pr{y > Y} - Pr{y < Y}``, i.e. twice the interval mean minus one."""
    return res.lo + res.hi - 1.0


def point_summary(res: FunctionalResidual, scale: str = "normal") -> NDArray:
    """Expected value of the residual variable on the display scale.

    Uniform scale: the interval midpoint. Normal scale: the truncated-normal
    mean ``(phi(z_lo) - phi(z_hi)) / (hi - lo)``; intervals too narrow for
    that difference to be accurate use the quantile of the midpoint. Values
    are clipped to the same window as :func:`to_normal_scale`.
    """
    if scale == "uniform":
        return 0.5 * (res.lo + res.hi)
    if scale != "normal":
        raise ValueError("scale must be 'uniform' or 'normal'")
    z_lo = special.ndtri(res.lo)
    z_hi = special.ndtri(res.hi)
    w = res.width
    with np.errstate(divide="ignore", invalid="ignore"):
        exact = (std_normal_pdf(z_lo) - std_normal_pdf(z_hi)) / w
    mid = special.ndtri(np.clip(0.5 * (res.lo + res.hi), CLIP_EPS, 1 - CLIP_EPS))
    out = np.where(w > 1e-6, exact, mid)
    return np.clip(out, _Z_MIN, _Z_MAX)


def surrogate_draw(res: FunctionalResidual, link: str, stream: RngStream) -> NDArray:
    """One draw of ``G^{-1}(U)`` with ``U ~ U(lo, hi)`` per residual.

    For a cumulative-link model this has the distribution of the latent
    error truncated to the observed category.
    """
    u = res.lo + res.width * stream.uniform(size=len(res))
    tiny = np.finfo(float).tiny
    u = np.clip(u, tiny, np.nextafter(1.0, 0.0))
    return inverse_link_quantile(link, u)


# ------------------------------------------------------------------ #
# Averaged residual curve
# ------------------------------------------------------------------ #


@dataclass(frozen=True)
class ResidualCurve:
    """Piecewise-linear average of residual CDFs.

    With ``exact=True`` the knots are all interval endpoints and linear
    interpolation reproduces the average everywhere; otherwise the values
    are exact only at the grid points.
    """

    knots: NDArray
    values: NDArray
    exact: bool = True
    n: int = 0

    def __call__(self, t: ArrayLike) -> NDArray:
        return np.interp(t, self.knots, self.values)

    def sup_deviation(self) -> float:
        return float(np.max(np.abs(self.values - self.knots)))


def _sum_eval_brute(lo, hi, t, chunk=2_000_000):
    out = np.empty(len(t))
    step = max(1, chunk // max(len(lo), 1))
    for s in range(0, len(t), step):
        tt = t[s : s + step]
        with np.errstate(over="ignore", invalid="ignore"):
            v = (tt[None, :] - lo[:, None]) / (hi - lo)[:, None]
        out[s : s + step] = np.clip(np.nan_to_num(v), 0.0, 1.0).sum(axis=0)
    return out


def _sum_eval_sweep(lo, hi, t):
    """Sum of residual CDFs at sorted points ``t`` in O((n + m) log n).

    Wide intervals use prefix sums of ``1/w`` and ``lo/w`` (extended
    precision); narrow intervals, where those sums would lose accuracy,
    enumerate the few evaluation points that fall inside them.
    """
    n = len(lo)
    w = hi - lo
    total = np.searchsorted(np.sort(hi), t, side="right").astype(float)  # hi <= t
    narrow = w < 1.0 / max(n, 1000)
    wide = ~narrow

    if np.any(wide):
        L = np.longdouble
        lw, hw, ww = lo[wide], hi[wide], w[wide]
        order = np.argsort(lw)
        a1 = np.concatenate([[0], np.cumsum(1 / ww[order].astype(L))])
        a2 = np.concatenate([[0], np.cumsum((lw[order] / ww[order]).astype(L))])
        k = np.searchsorted(lw[order], t, side="left")  # lo < t
        order_h = np.argsort(hw)
        b1 = np.concatenate([[0], np.cumsum(1 / ww[order_h].astype(L))])
        b2 = np.concatenate([[0], np.cumsum((lw[order_h] / ww[order_h]).astype(L))])
        kh = np.searchsorted(hw[order_h], t, side="right")  # hi <= t
        tl = t.astype(L)
        started = tl * a1[k] - a2[k]
        finished = tl * b1[kh] - b2[kh]
        # completed intervals were already counted as 1 in ``total``
        total += (started - finished).astype(float)

    if np.any(narrow):
        ln, hn, wn = lo[narrow], hi[narrow], w[narrow]
        a = np.searchsorted(t, ln, side="right")
        b = np.searchsorted(t, hn, side="left")
        cnt = np.maximum(b - a, 0)
        if cnt.sum():
            owner = np.repeat(np.arange(len(ln)), cnt)
            offs = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
            pos = np.repeat(a, cnt) + offs
            vals = (t[pos] - ln[owner]) / wn[owner]
            total += np.bincount(pos, weights=vals, minlength=len(t))
    return total


def average_curve(
    res: FunctionalResidual, grid: int | None = None, method: str = "auto"
) -> ResidualCurve:
    """Average of the residual CDFs, ``(1/n) sum_i Res_i(t)``.

    By default the result is exact: knots at every interval endpoint (plus
    0 and 1). ``grid=k`` evaluates on ``k`` equally spaced points instead,
    which is only meant for plotting.
    """
    n = len(res)
    if n < 1:
        raise ValueError("average_curve needs at least one residual")
    if grid is None:
        knots = np.unique(np.concatenate([[0.0, 1.0], res.lo, res.hi]))
    else:
        knots = np.linspace(0.0, 1.0, int(grid))
    if method == "auto":
        method = "brute" if n * len(knots) <= 4_000_000 else "sweep"
    # a fixed summation order makes the curve bitwise independent of row order
    order = np.lexsort((res.hi, res.lo))
    lo, hi = res.lo[order], res.hi[order]
    if method == "brute":
        s = _sum_eval_brute(lo, hi, knots)
    elif method == "sweep":
        s = _sum_eval_sweep(lo, hi, knots)
    else:
        raise ValueError(f"unknown method {method!r}")
    values = np.clip(s / n, 0.0, 1.0)
    values[0], values[-1] = 0.0, 1.0
    values = np.maximum.accumulate(values)
    return ResidualCurve(knots, values, exact=grid is None, n=n)


# ------------------------------------------------------------------ #
# Classical point residuals
# ------------------------------------------------------------------ #


def _classical_inputs(model: FittedModel, data: Dataset):
    fam = model.family
    if fam not in ("binary-logit", "poisson", "quasi-poisson"):
        raise UnsupportedFamilyError(
            f"Pearson/deviance residuals are only defined here for binary and Poisson "
            f"families, not {fam}"
        )
    return fam, data.y.astype(float), model.mean(data)


def pearson_residual(model: FittedModel, data: Dataset) -> NDArray:
    fam, y, mu = _classical_inputs(model, data)
    var = mu * (1 - mu) if fam == "binary-logit" else mu
    return (y - mu) / np.sqrt(var)


def deviance_residual(model: FittedModel, data: Dataset) -> NDArray:
    fam, y, mu = _classical_inputs(model, data)
    return _deviance(fam, y, mu)


def _deviance(fam: str, y: NDArray, mu: NDArray) -> NDArray:
    if fam == "binary-logit":
        d = -2.0 * (special.xlogy(y, mu) + special.xlogy(1 - y, 1 - mu))
    else:
        d = 2.0 * (special.xlogy(y, y / mu) - (y - mu))
    return np.sign(y - mu) * np.sqrt(np.maximum(d, 0.0))


# ------------------------------------------------------------------ #
# Export
# ------------------------------------------------------------------ #


RESIDUAL_COLUMNS = (
    "index", "y", "lo", "hi", "z_lo", "z_hi", "point_uniform", "point_normal", "sign_residual",
)


def residual_table(res: FunctionalResidual, y: ArrayLike):
    """Residual export as a DataFrame; ``y`` is the full outcome vector of the data."""
    import pandas as pd

    z_lo, z_hi = to_normal_scale(res)
    return pd.DataFrame(
        {
            "index": res.index,
            "y": np.asarray(y)[res.index],
            "lo": res.lo,
            "hi": res.hi,
            "z_lo": z_lo,
            "z_hi": z_hi,
            "point_uniform": point_summary(res, "uniform"),
            "point_normal": point_summary(res, "normal"),
            "sign_residual": sign_residual(res),
        },
        columns=list(RESIDUAL_COLUMNS),
    )


def write_residuals_csv(res: FunctionalResidual, y: ArrayLike, path: str | Path) -> Path:
    path = Path(path)
    residual_table(res, y).to_csv(path, index=False, float_format="%.17g")
    return path
