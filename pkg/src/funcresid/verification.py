"""Monte Carlo and exactness checks bundled into one pass/fail report.

:func:`verification_report` runs every check with the thresholds used for
acceptance and returns plain dictionaries, ready for JSON.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
from scipy import stats

from .core import RngStream
from .models import inverse_link_quantile
from .residuals import FunctionalResidual, average_curve, evaluate, surrogate_draw
from .simulation import (
    gen_overdispersed,
    get_scenario,
    misspecification_check,
    truth_model,
    verify_theorem1,
    verify_theorem2,
    verify_theorem3,
    verify_theorem5,
)

__all__ = ["Check", "verification_report", "CHECKS", "truncated_latent_sample"]

MISSPECIFIED = (
    "ordinal-quadratic",
    "ordinal-cubic",
    "ordinal-covariate",
    "ordinal-interaction",
    "poisson-quadratic",
    "poisson-cubic",
    "poisson-covariate",
    "poisson-interaction",
)
SURROGATE_CELLS = ((0.2, 0.7), (0.9, 0.99), (0.0, 0.3))


@dataclass
class Check:
    name: str
    statistic: float
    threshold: float
    relation: str
    passed: bool
    seconds: float
    detail: dict

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"[{flag}] {self.name}: {self.statistic:.6g} {self.relation} {self.threshold:g}"


def _check(name, stat, threshold, relation, t0, **detail) -> Check:
    ok = {"<": stat < threshold, ">": stat > threshold, ">=": stat >= threshold}[relation]
    return Check(name, float(stat), float(threshold), relation, bool(ok), time.perf_counter() - t0, detail)


def _widen(quick: bool, full: int, small: int) -> float:
    """Threshold factor for quick runs: the Monte Carlo SE grows as sqrt(full / small)."""
    return float(np.sqrt(full / small)) if quick else 1.0


def truncated_latent_sample(
    link: str, lo: float, hi: float, size: int, stream: RngStream, batch: int = 1 << 20
) -> np.ndarray:
    """Latent errors drawn from their own distribution and kept if inside ``(G^{-1}(lo), G^{-1}(hi)]``.

    Rejection sampling, independent of the inverse-CDF route.
    """
    a = -np.inf if lo <= 0 else float(inverse_link_quantile(link, lo))
    b = np.inf if hi >= 1 else float(inverse_link_quantile(link, hi))
    gen = stream.generator
    out: list[np.ndarray] = []
    have = 0
    while have < size:
        if link == "logit":
            e = gen.logistic(size=batch)
        elif link == "probit":
            e = gen.standard_normal(batch)
        elif link == "cloglog":
            e = -gen.gumbel(size=batch)  # minimum-extreme-value law, CDF 1 - exp(-exp(u))
        else:
            raise ValueError(f"unknown link {link!r}")
        keep = e[(e > a) & (e <= b)]
        out.append(keep)
        have += len(keep)
    return np.concatenate(out)[:size]


# ------------------------------------------------------------------ #


def check_theorem1(quick: bool = False) -> Check:
    t0 = time.perf_counter()
    N = 20_000 if quick else 100_000
    devs = {}
    for k, name in enumerate(("logistic", "ordinal-correct")):
        truth = truth_model(get_scenario(name))
        for j, x in enumerate((-1.0, 0.0, 1.0)):
            devs[f"{name}@x={x:g}"] = verify_theorem1(truth, [x], RngStream(101, 10 * k + j), N=N)
    f = _widen(quick, 100_000, N)
    return _check(
        "theorem1_conditional_mean", max(devs.values()), 0.006 * f, "<", t0, N=N, widen=f, cells=devs
    )


def check_theorem2(quick: bool = False) -> Check:
    t0 = time.perf_counter()
    n = 20_000 if quick else 100_000
    dev = verify_theorem2(get_scenario("ordinal-correct"), n, RngStream(202, 0))
    f = _widen(quick, 100_000, n)
    return _check("theorem2_unconditional_mean", dev, 0.01 * f, "<", t0, n=n, widen=f)


def check_theorem3(quick: bool = False) -> list[Check]:
    out = []
    seeds = range(10 if quick else 50)
    for name in ("ordinal-correct", "poisson-correct"):
        t0 = time.perf_counter()
        table = verify_theorem3(get_scenario(name), [1000, 10_000], seeds)
        out.append(
            _check(
                f"theorem3_rate[{name}]", table.ratio(1000, 10_000), 0.5, "<", t0,
                medians=table.medians.tolist(), seeds=len(seeds),
            )
        )
    return out


def check_theorem4(quick: bool = False) -> Check:
    t0 = time.perf_counter()
    m = 20_000 if quick else 100_000
    ks = {}
    for i, link in enumerate(("logit", "probit")):
        for j, (lo, hi) in enumerate(SURROGATE_CELLS):
            res = FunctionalResidual(np.full(m, lo), np.full(m, hi))
            sur = surrogate_draw(res, link, RngStream(404, 2 * (10 * i + j)))
            direct = truncated_latent_sample(link, lo, hi, m, RngStream(404, 2 * (10 * i + j) + 1))
            ks[f"{link}({lo:g},{hi:g})"] = float(stats.ks_2samp(sur, direct).statistic)
    f = _widen(quick, 100_000, m)
    return _check("theorem4_surrogate_ks", max(ks.values()), 0.015 * f, "<", t0, draws=m, widen=f, cells=ks)


def check_theorem5(quick: bool = False) -> Check:
    t0 = time.perf_counter()
    rng = RngStream(505, 0)
    ends = np.sort(rng.uniform(size=(100, 2)), axis=1)
    res = FunctionalResidual(ends[:, 0], ends[:, 1])
    draws = 20_000 if quick else 100_000
    chk = verify_theorem5(res, RngStream(505, 1), draws=draws)
    literal = verify_theorem5(res, RngStream(505, 1), draws=draws, z=2.0)
    return _check(
        "theorem5_sign_identity", chk.max_ratio, 1.0, "<", t0,
        draws=draws, max_discrepancy=chk.max_discrepancy,
        exceed_two_se=int(np.sum(~(literal.discrepancy < literal.bound))),
    )


def check_worked_example(quick: bool = False) -> list[Check]:
    from .models import ModelSpec, known_model
    from .residuals import functional_residual

    t0 = time.perf_counter()
    m = known_model(ModelSpec("binary-logit", "x"), ["x"], [-1.0, 2.0])
    a = functional_residual(m, 0, [1.0])
    b = functional_residual(m, 1, [-1.0])
    exact_a = (0.0, 1.0 / (1.0 + np.e))
    exact_b = (1.0 / (1.0 + np.exp(-3.0)), 1.0)
    err = max(
        abs(a.lo[0] - exact_a[0]), abs(a.hi[0] - exact_a[1]),
        abs(b.lo[0] - exact_b[0]), abs(b.hi[0] - exact_b[1]),
    )
    return [
        _check(
            "worked_example_intervals", err, 1e-3, "<", t0,
            y0_x1=[float(a.lo[0]), float(a.hi[0])], y1_xm1=[float(b.lo[0]), float(b.hi[0])],
        )
    ]


def check_misspecification(quick: bool = False) -> list[Check]:
    out = []
    for name in MISSPECIFIED:
        t0 = time.perf_counter()
        r = misspecification_check(get_scenario(name))
        for p in r.probes:
            if p.signal:
                out.append(
                    _check(
                        f"lowess_alarm[{name}:{p.term}]", p.ratio, 3.0, ">=", t0,
                        working=p.working_range, correct=p.correct_range,
                    )
                )
            else:
                out.append(
                    _check(
                        f"lowess_no_false_alarm[{name}:{p.term}]", p.working_range,
                        3.0 * p.correct_range, "<", t0,
                        working=p.working_range, correct=p.correct_range,
                    )
                )
    return out


def check_hurdle(quick: bool = False) -> list[Check]:
    t0 = time.perf_counter()
    r = misspecification_check(get_scenario("hurdle"))
    return [
        _check("hurdle_poisson_lower_gap", r.working_lower_gap, 0.05, ">", t0),
        _check("hurdle_fit_sup_dev", r.correct_sup_dev, 0.03, "<", t0),
    ]


def check_overdispersion(quick: bool = False) -> list[Check]:
    t0 = time.perf_counter()
    m = 200_000 if quick else 1_000_000
    y = gen_overdispersed(np.ones(m), 1.0 / 6.0, RngStream(909, 0))
    mean = float(y.mean())
    ratio = float(y.var(ddof=1) / mean)
    f = _widen(quick, 1_000_000, m)
    out = [
        _check("overdispersed_mean_error", abs(mean - 1.0), 0.01 * f, "<", t0, mean=mean, draws=m),
        _check("overdispersed_var_ratio_error", abs(ratio - 7.0), 0.15 * f, "<", t0, ratio=ratio),
    ]
    t0 = time.perf_counter()
    r = misspecification_check(get_scenario("overdispersion"))
    out.append(
        _check(
            "overdispersion_sup_dev_drop", r.working_sup_dev / r.correct_sup_dev, 3.0, ">=", t0,
            poisson=r.working_sup_dev, quasi_poisson=r.correct_sup_dev,
        )
    )
    return out


def check_exactness(quick: bool = False) -> Check:
    t0 = time.perf_counter()
    rng = RngStream(1212, 0)
    worst = 0.0
    sets = 20 if quick else 100
    for k in range(sets):
        n = int(rng.generator.integers(1, 3000))
        ends = np.sort(rng.uniform(size=(n, 2)), axis=1)
        # some narrow and some shared endpoints
        ends[: n // 5, 1] = ends[: n // 5, 0] + 1e-9
        lo, hi = ends[:, 0], np.minimum(np.maximum(ends[:, 1], ends[:, 0] + 1e-12), 1.0)
        res = FunctionalResidual(lo, hi)
        t = rng.uniform(size=1000)
        direct = evaluate(res, t).mean(axis=0)
        for method in ("brute", "sweep"):
            curve = average_curve(res, method=method)
            worst = max(worst, float(np.max(np.abs(curve(t) - direct))))
    return _check("average_curve_exactness", worst, 1e-12, "<", t0, sets=sets)


CHECKS: dict[str, Callable] = {
    "theorem1": check_theorem1,
    "theorem2": check_theorem2,
    "theorem3": check_theorem3,
    "theorem4": check_theorem4,
    "theorem5": check_theorem5,
    "worked_example": check_worked_example,
    "misspecification": check_misspecification,
    "hurdle": check_hurdle,
    "overdispersion": check_overdispersion,
    "exactness": check_exactness,
}


def verification_report(only: list[str] | None = None, quick: bool = False) -> dict:
    """Run the selected checks (all by default).

    ``quick`` shrinks Monte Carlo sizes and widens the affected thresholds by
    the matching standard-error factor; acceptance runs use ``quick=False``.
    """
    names = only or list(CHECKS)
    unknown = set(names) - set(CHECKS)
    if unknown:
        raise KeyError(f"unknown checks {sorted(unknown)}; known: {sorted(CHECKS)}")
    results: list[Check] = []
    for name in names:
        got = CHECKS[name](quick=quick)
        results.extend(got if isinstance(got, list) else [got])
    return {
        "quick": quick,
        "passed": all(c.passed for c in results),
        "checks": [asdict(c) for c in results],
    }
