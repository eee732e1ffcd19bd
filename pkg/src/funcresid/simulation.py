"""Scenario generators and Monte Carlo checks of the residual theory.

Every scenario is registered by name and reproduces its data bit-identically
from ``(name, seed)``. Covariates ``N(m, s)`` are drawn with mean ``m`` and
standard deviation ``s``.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .core import Dataset, RngStream, design_matrix, parse_terms
from .diagnostics import RESIDUAL_LOWESS_ITERS, fnfn, lowess
from .models import FittedModel, ModelSpec, fit, known_model
from .residuals import FunctionalResidual, functional_residuals, point_summary

__all__ = [
    "Covariate",
    "Probe",
    "ScenarioSpec",
    "SCENARIOS",
    "get_scenario",
    "scenario_stream",
    "generate",
    "simulate",
    "truth_model",
    "gen_overdispersed",
    "verify_theorem1",
    "verify_theorem2",
    "verify_theorem3",
    "verify_theorem5",
    "misspecification_check",
    "T_GRID",
]

T_GRID = np.arange(1, 100) / 100.0


@dataclass(frozen=True)
class Covariate:
    name: str
    mean: float = 0.0
    sd: float = 1.0


@dataclass(frozen=True)
class Probe:
    """A covariate (or term such as ``x1:x2``) to smooth residuals against.

    ``signal`` says whether the misspecified fit should show a trend there;
    ``False`` marks an irrelevant covariate that must not raise an alarm.
    """

    term: str
    signal: bool = True


@dataclass(frozen=True)
class ScenarioSpec:
    """A data-generating process plus the working model(s) fitted to it.

    ``family`` is the generator family; ``overdispersed-poisson`` draws from
    the gamma-mixed Poisson with ``phi``. ``working`` is the (possibly
    misspecified) model one would fit first and ``correct`` the model that
    matches the truth. ``null_sup_dev`` is the 95th percentile of the Fn-Fn
    sup deviation of the correct fit at ``n`` over a pilot run seeded by
    ``pilot_seed`` (seeds ``pilot_seed .. pilot_seed+199``).
    """

    name: str
    family: str
    covariates: tuple[Covariate, ...]
    terms: str
    beta: tuple[float, ...]
    alpha: tuple[float, ...] | None = None
    zero_terms: str | None = None
    zero_beta: tuple[float, ...] | None = None
    phi: float | None = None
    n: int = 1000
    seed: int = 2024
    working: ModelSpec | None = None
    correct: ModelSpec | None = None
    probes: tuple[Probe, ...] = ()
    null_sup_dev: float | None = None
    pilot_seed: int | None = None
    description: str = ""

    def __post_init__(self) -> None:
        if self.correct is None:
            object.__setattr__(self, "correct", self.truth_spec())
        if self.working is None:
            object.__setattr__(self, "working", self.correct)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.covariates)

    @property
    def misspecified(self) -> bool:
        return self.working != self.correct

    def truth_spec(self) -> ModelSpec:
        fam = {"overdispersed-poisson": "quasi-poisson"}.get(self.family, self.family)
        return ModelSpec(fam, self.terms, zero_terms=self.zero_terms)


def _adjacent(name, terms, beta, alpha, covs, working=None, probes=(), **kw) -> ScenarioSpec:
    correct = ModelSpec("adjacent-category", terms)
    work = ModelSpec("adjacent-category", working) if working else None
    return ScenarioSpec(
        name, "adjacent-category", covs, terms, beta, alpha,
        working=work, correct=correct, probes=probes, **kw,
    )


def _poisson(name, terms, beta, covs, working=None, probes=(), **kw) -> ScenarioSpec:
    correct = ModelSpec("poisson", terms)
    work = ModelSpec("poisson", working) if working else None
    return ScenarioSpec(
        name, "poisson", covs, terms, beta, working=work, correct=correct, probes=probes, **kw
    )


_X = (Covariate("x", 0.0, 1.0),)
_EX1 = dict(terms="x + x^2", beta=(1.5, -1.0), alpha=(1.5, 1.5, -1.0, 1.0), covs=_X)
_ORD3 = (Covariate("x1", 0.0, 1.0), Covariate("x2", -1.0, 0.8), Covariate("x3", 0.5, 1.0))
_POI1 = dict(terms="x + x^2", beta=(1.0, 0.2, 0.15), covs=_X)

# null_sup_dev: pilot q95 from `python -m funcresid.simulation --calibrate`, rounded up to 4 dp
_REGISTRY: tuple[ScenarioSpec, ...] = (
    ScenarioSpec(
        "logistic", "binary-logit", _X, "x", (-1.0, 2.0),
        description="logit Pr{Y=1} = -1 + 2x",
        null_sup_dev=0.0042, pilot_seed=10_000,
    ),
    _adjacent(
        "ordinal-correct", **_EX1,
        description="adjacent-category logit with x and x^2, fitted correctly",
        null_sup_dev=0.0113, pilot_seed=10_000,
    ),
    _adjacent(
        "ordinal-quadratic", **_EX1, working="x", probes=(Probe("x"),),
        description="same truth, working model lacks x^2",
        null_sup_dev=0.0099, pilot_seed=10_000,
    ),
    _adjacent(
        "ordinal-cubic", "x + x^2 + x^3", (2.0, -1.0, -1.5), (-1.0, 1.5, 2.0, 3.0), _X,
        working="x + x^2", probes=(Probe("x"),),
        description="cubic truth, working model stops at x^2",
        null_sup_dev=0.0097, pilot_seed=10_000,
    ),
    _adjacent(
        "ordinal-covariate", "x1 + x2 + x3", (1.5, 1.0, 0.0), (-1.0, -2.0, 0.5, 2.0), _ORD3,
        working="x1", probes=(Probe("x2"), Probe("x3", signal=False)),
        description="x2 relevant, x3 irrelevant, working model uses x1 only",
        null_sup_dev=0.0112, pilot_seed=10_000,
    ),
    _adjacent(
        "ordinal-interaction", "x1 + x2 + x1:x2", (1.0, 2.0, 2.0), (-1.0, -2.0, 0.5, 2.0),
        _ORD3[:2], working="x1 + x2", probes=(Probe("x1:x2"),),
        description="x1*x2 interaction missing from the working model",
        null_sup_dev=0.0095, pilot_seed=10_000,
    ),
    _poisson(
        "poisson-correct", **_POI1,
        description="log E[Y] = 1 + 0.2x + 0.15x^2, fitted correctly",
        null_sup_dev=0.0208, pilot_seed=10_000,
    ),
    _poisson(
        "poisson-quadratic", **_POI1, working="x", probes=(Probe("x"),),
        description="same truth, working model lacks x^2",
        null_sup_dev=0.0222, pilot_seed=10_000,
    ),
    _poisson(
        "poisson-cubic", "x + x^2 + x^3", (0.8, -0.2, 0.5, -0.5), (Covariate("x", 0.0, 0.5),),
        working="x + x^2", probes=(Probe("x"),),
        description="cubic truth, working model stops at x^2",
        null_sup_dev=0.0208, pilot_seed=10_000,
    ),
    _poisson(
        "poisson-covariate", "x1 + x2 + x3", (0.5, 0.25, 0.5, 0.0),
        (Covariate("x1", 0.0, 0.8), Covariate("x2", -1.0, 1.0), Covariate("x3", 0.8, 0.9)),
        working="x1", probes=(Probe("x2"), Probe("x3", signal=False)),
        description="x2 relevant, x3 irrelevant, working model uses x1 only",
        null_sup_dev=0.0165, pilot_seed=10_000,
    ),
    _poisson(
        "poisson-interaction", "x1 + x2 + x1:x2", (-0.1, 0.8, -0.5, 0.6),
        (Covariate("x1", 0.5, 1.0), Covariate("x2", -1.0, 0.7)),
        working="x1 + x2", probes=(Probe("x1:x2"),),
        description="x1*x2 interaction missing from the working model",
        null_sup_dev=0.0178, pilot_seed=10_000,
    ),
    ScenarioSpec(
        "hurdle", "hurdle-poisson", (Covariate("x", 0.0, 0.8),), "x", (1.0, 1.0),
        zero_terms="x", zero_beta=(1.0, 0.2),
        working=ModelSpec("poisson", "x"), correct=ModelSpec("hurdle-poisson", "x", zero_terms="x"),
        description="logit Pr{Y=0} = 1 + 0.2x, positives truncated Poisson with log mean 1 + x",
        null_sup_dev=0.0096, pilot_seed=10_000,
    ),
    ScenarioSpec(
        "overdispersion", "overdispersed-poisson", _X, "x", (1.2, 1.3), phi=1.0 / 6.0,
        working=ModelSpec("poisson", "x"), correct=ModelSpec("quasi-poisson", "x"),
        description="gamma-mixed Poisson, log mean 1.2 + 1.3x, variance/mean 7",
        null_sup_dev=0.0339, pilot_seed=10_000,
    ),
)

SCENARIOS: dict[str, ScenarioSpec] = {s.name: s for s in _REGISTRY}


def get_scenario(name: str, **overrides) -> ScenarioSpec:
    try:
        spec = SCENARIOS[name]
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; known: {sorted(SCENARIOS)}") from None
    return replace(spec, **overrides) if overrides else spec


def scenario_stream(spec: ScenarioSpec, seed: int | None = None) -> RngStream:
    """The stream a scenario draws from: keyed by its seed and a hash of its name."""
    seed = spec.seed if seed is None else seed
    return RngStream(seed, zlib.crc32(spec.name.encode()))


# ------------------------------------------------------------------ #
# Generation
# ------------------------------------------------------------------ #


def truth_model(spec: ScenarioSpec) -> FittedModel:
    """The data-generating distribution as a model object."""
    dispersion = 1.0
    if spec.family == "overdispersed-poisson":
        dispersion = (1.0 + spec.phi) / spec.phi
    return known_model(
        spec.truth_spec(), spec.names, spec.beta, alpha=spec.alpha,
        zero_beta=spec.zero_beta, dispersion=dispersion,
    )


def gen_overdispersed(mu: ArrayLike, phi: float, stream: RngStream) -> NDArray:
    """Gamma-mixed Poisson counts with mean ``mu`` and variance ``mu (1 + phi) / phi``.

    ``lambda ~ Gamma(shape = mu * phi, rate = phi)``, ``Y ~ Poisson(lambda)``.
    A zero mean gives zero counts.
    """
    mu = np.asarray(mu, dtype=float)
    if not np.isfinite(phi) or phi <= 0:
        raise ValueError("phi must be a positive finite number")
    if np.any(mu < 0) or not np.all(np.isfinite(mu)):
        raise ValueError("means must be finite and non-negative")
    pos = mu > 0
    lam = np.zeros_like(mu)
    if np.any(pos):
        lam[pos] = stream.gamma(mu[pos] * phi, phi)
    return stream.poisson(lam).astype(np.int64)


def generate(spec: ScenarioSpec, stream: RngStream, n: int | None = None) -> Dataset:
    """Draw covariates (in declaration order) then outcomes from ``stream``."""
    n = spec.n if n is None else int(n)
    if n < 1:
        raise ValueError("n must be >= 1")
    cols = {c.name: stream.normal(c.mean, c.sd, n) for c in spec.covariates}
    X = np.column_stack([cols[c] for c in spec.names])
    data = Dataset(np.zeros(n, dtype=np.int64), X, spec.names)
    truth = truth_model(spec)
    if spec.family == "overdispersed-poisson":
        y = gen_overdispersed(truth.mean(data), spec.phi, stream)
    else:
        y = truth.sample(data, stream)
    return Dataset(np.asarray(y, dtype=np.int64), X, spec.names)


def simulate(name: str, n: int | None = None, seed: int | None = None) -> Dataset:
    """Dataset for a registered scenario, reproducible from ``(name, n, seed)``."""
    spec = get_scenario(name)
    return generate(spec, scenario_stream(spec, seed), n)


def probe_values(data: Dataset, term: str) -> NDArray:
    terms = parse_terms(term).without_intercept()
    M = design_matrix(data, terms)
    if M.shape[1] != 1:
        raise ValueError(f"probe {term!r} must expand to a single column")
    return M[:, 0]


# ------------------------------------------------------------------ #
# Theorem checks
# ------------------------------------------------------------------ #


def _mean_eval_grouped(lo: NDArray, hi: NDArray, t: NDArray) -> NDArray:
    pairs, counts = np.unique(np.column_stack([lo, hi]), axis=0, return_counts=True)
    ev = np.clip((t[None, :] - pairs[:, :1]) / (pairs[:, 1:] - pairs[:, :1]), 0.0, 1.0)
    return (counts[:, None] * ev).sum(axis=0) / counts.sum()


def verify_theorem1(
    truth: FittedModel,
    x: ArrayLike,
    stream: RngStream,
    N: int = 100_000,
    t_grid: ArrayLike = T_GRID,
) -> float:
    """Max over ``t_grid`` of ``|mean_Y Res(t; Y, x) - t|`` with ``N`` draws of Y at fixed ``x``.

    ``x`` is one raw covariate row. The residuals use the same model that
    generated Y, which is the setting in which the conditional mean is ``t``.
    """
    if N < 1000:
        raise ValueError("N must be at least 1000")
    t = np.asarray(t_grid, dtype=float)
    row = np.atleast_1d(np.asarray(x, dtype=float))
    X = np.repeat(row[None, :], N, axis=0)
    data = Dataset(np.zeros(N, dtype=np.int64), X, truth.names)
    y = np.asarray(truth.sample(data, stream), dtype=np.int64)
    lo = truth.cdf(y - 1, data)
    hi = truth.cdf(y, data)
    return float(np.max(np.abs(_mean_eval_grouped(lo, hi, t) - t)))


def verify_theorem2(spec: ScenarioSpec, n: int, stream: RngStream) -> float:
    """Sup deviation of the averaged residual curve at random covariates under the true model."""
    data = generate(spec, stream, n)
    res = functional_residuals(truth_model(spec), data)
    return fnfn(res).sup_dev


@dataclass(frozen=True)
class ConvergenceTable:
    """Fn-Fn sup deviations, one row per sample size, one column per seed."""

    scenario: str
    n_values: tuple[int, ...]
    seeds: tuple[int, ...]
    sup_dev: NDArray
    model: str = "correct"

    @property
    def medians(self) -> NDArray:
        return np.median(self.sup_dev, axis=1)

    def ratio(self, n_small: int, n_large: int) -> float:
        """``median(n_large) / median(n_small)``."""
        i, j = self.n_values.index(n_small), self.n_values.index(n_large)
        return float(self.medians[j] / self.medians[i])

    def as_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "model": self.model,
            "n": list(self.n_values),
            "median_sup_dev": [float(m) for m in self.medians],
        }


def verify_theorem3(
    spec: ScenarioSpec,
    n_values: Sequence[int],
    seeds: Sequence[int],
    model: str = "correct",
) -> ConvergenceTable:
    """Fit ``spec.correct`` (or ``spec.working``) at each ``n`` and seed and record sup_dev.

    Each ``(seed, n)`` pair draws from its own stream so the table does not
    depend on the order in which sample sizes are listed.
    """
    if model not in ("correct", "working"):
        raise ValueError("model must be 'correct' or 'working'")
    ms = spec.correct if model == "correct" else spec.working
    out = np.empty((len(n_values), len(seeds)))
    base = scenario_stream(spec)
    for j, seed in enumerate(seeds):
        for i, n in enumerate(n_values):
            stream = RngStream(seed, base.stream_id).substream(int(n))
            data = generate(spec, stream, n)
            res = functional_residuals(fit(ms, data), data)
            out[i, j] = fnfn(res).sup_dev
    return ConvergenceTable(spec.name, tuple(int(n) for n in n_values), tuple(seeds), out, model)


@dataclass(frozen=True)
class SignIdentityCheck:
    discrepancy: NDArray
    bound: NDArray
    draws: int

    @property
    def max_discrepancy(self) -> float:
        return float(self.discrepancy.max())

    @property
    def max_ratio(self) -> float:
        return float(np.max(self.discrepancy / self.bound))

    @property
    def passed(self) -> bool:
        return bool(np.all(self.discrepancy < self.bound))


def verify_theorem5(
    res: FunctionalResidual, stream: RngStream, draws: int = 100_000, z: float = 4.0
) -> SignIdentityCheck:
    """Compare ``lo + hi - 1`` with ``2 * mean(U) - 1`` from ``draws`` uniforms on each interval.

    The Monte Carlo standard error of ``2 * mean(U) - 1`` is
    ``2 (hi - lo) / sqrt(12 draws)``; the bound is ``z`` of those.
    """
    sign = res.lo + res.hi - 1.0
    disc = np.empty(len(res))
    for i in range(len(res)):
        u = res.lo[i] + (res.hi[i] - res.lo[i]) * stream.uniform(size=draws)
        disc[i] = abs(sign[i] - (2.0 * u.mean() - 1.0))
    bound = z * 2.0 * res.width / np.sqrt(12.0 * draws)
    # identical endpoints cannot deviate; keep the comparison strict but finite
    bound = np.maximum(bound, 1e-15)
    return SignIdentityCheck(disc, bound, draws)


# ------------------------------------------------------------------ #
# Misspecification statistics
# ------------------------------------------------------------------ #


@dataclass(frozen=True)
class ProbeResult:
    term: str
    signal: bool
    working_range: float
    correct_range: float

    @property
    def ratio(self) -> float:
        return self.working_range / self.correct_range if self.correct_range > 0 else np.inf


@dataclass(frozen=True)
class MisspecificationResult:
    scenario: str
    seed: int
    n: int
    working_sup_dev: float
    correct_sup_dev: float
    working_lower_gap: float
    correct_lower_gap: float
    probes: tuple[ProbeResult, ...] = field(default_factory=tuple)

    def as_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "n": self.n,
            "working_sup_dev": self.working_sup_dev,
            "correct_sup_dev": self.correct_sup_dev,
            "working_lower_gap": self.working_lower_gap,
            "correct_lower_gap": self.correct_lower_gap,
            "probes": [
                {
                    "term": p.term,
                    "signal": p.signal,
                    "working_range": p.working_range,
                    "correct_range": p.correct_range,
                    "ratio": p.ratio,
                }
                for p in self.probes
            ],
        }


def misspecification_check(
    spec: ScenarioSpec,
    seed: int | None = None,
    n: int | None = None,
    span: float = 2.0 / 3.0,
    iters: int = RESIDUAL_LOWESS_ITERS,
    t_low: float = 0.2,
) -> MisspecificationResult:
    """Fit the working and correct models to one dataset and compute the discrepancy statistics.

    For each probe the LOWESS range of normal-scale point summaries is
    reported under both fits. The Fn-Fn sup deviation and the lower-tail gap
    ``Res(t_low) - t_low`` are reported for both fits as well.
    """
    seed = spec.seed if seed is None else seed
    data = generate(spec, scenario_stream(spec, seed), n)
    out = {}
    for label, ms in (("working", spec.working), ("correct", spec.correct)):
        res = functional_residuals(fit(ms, data), data)
        curve = fnfn(res)
        v = point_summary(res, "normal")
        ranges = {}
        for p in spec.probes:
            x = probe_values(data, p.term)[res.index]
            ranges[p.term] = lowess(x, v, span=span, iters=iters).range
        out[label] = (curve.sup_dev, float(curve(t_low) - t_low), ranges)
    probes = tuple(
        ProbeResult(p.term, p.signal, out["working"][2][p.term], out["correct"][2][p.term])
        for p in spec.probes
    )
    return MisspecificationResult(
        spec.name, seed, data.n, out["working"][0], out["correct"][0],
        out["working"][1], out["correct"][1], probes,
    )


def calibrate_null(spec: ScenarioSpec, seeds: Sequence[int], q: float = 0.95) -> dict:
    """Null distribution of the correct-model Fn-Fn sup deviation at ``spec.n``."""
    table = verify_theorem3(spec, [spec.n], seeds, model="correct")
    vals = table.sup_dev[0]
    return {
        "scenario": spec.name,
        "n": spec.n,
        "seeds": [int(seeds[0]), int(seeds[-1])],
        "median": float(np.median(vals)),
        f"q{int(q * 100)}": float(np.quantile(vals, q)),
    }


def _main(argv: Sequence[str] | None = None) -> None:
    import argparse
    import json

    ap = argparse.ArgumentParser(description="Pilot calibration of scenario null thresholds")
    ap.add_argument("--calibrate", action="store_true")
    ap.add_argument("--seeds", type=int, default=200)
    ap.add_argument("--start", type=int, default=10_000)
    args = ap.parse_args(argv)
    if args.calibrate:
        seeds = list(range(args.start, args.start + args.seeds))
        for spec in _REGISTRY:
            print(json.dumps(calibrate_null(spec, seeds)), flush=True)


if __name__ == "__main__":
    _main()
