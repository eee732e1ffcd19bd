"""Acceptance suite: one PASS/FAIL line per numbered criterion.

Run with ``pytest tests/test_acceptance.py -v``; the verdict lines are
printed even when pytest captures output. Criteria 10 and 11 need the
public wine and bike CSVs (see README); without them they print
UNVERIFIED and skip.
"""

from __future__ import annotations

import time

import pytest

from funcresid.casestudy import bike_pipeline, wine_pipeline
from funcresid.verification import CHECKS, Check


@pytest.fixture
def say(capsys):
    def emit(number: int, label: str, passed: bool | None, detail: str) -> None:
        flag = {True: "PASS", False: "FAIL", None: "UNVERIFIED"}[passed]
        with capsys.disabled():
            print(f"\n[{flag}] criterion {number} {label}: {detail}")

    return emit


def _as_list(got) -> list[Check]:
    return got if isinstance(got, list) else [got]


def _run_checks(say, number: int, label: str, key: str, max_seconds: float | None = None):
    t0 = time.perf_counter()
    checks = _as_list(CHECKS[key]())
    elapsed = time.perf_counter() - t0
    ok = all(c.passed for c in checks)
    parts = [c.line() for c in checks]
    if max_seconds is not None:
        ok = ok and elapsed < max_seconds
        parts.append(f"runtime {elapsed:.2f}s < {max_seconds:g}s")
    say(number, label, ok, "; ".join(parts))
    assert ok, parts
    return checks


def test_criterion_01_conditional_mean(say):
    _run_checks(say, 1, "conditional mean", "theorem1", max_seconds=10.0)


def test_criterion_02_unconditional_mean(say):
    _run_checks(say, 2, "unconditional mean", "theorem2", max_seconds=10.0)


@pytest.mark.slow
def test_criterion_03_convergence_rate(say):
    _run_checks(say, 3, "convergence rate", "theorem3")


def test_criterion_04_surrogate_equivalence(say):
    _run_checks(say, 4, "surrogate equivalence", "theorem4")


def test_criterion_05_sign_identity(say):
    _run_checks(say, 5, "sign-residual identity", "theorem5")


def test_criterion_06_worked_example(say):
    _run_checks(say, 6, "worked example", "worked_example")


def test_criterion_07_misspecification(say):
    checks = _run_checks(say, 7, "misspecification detection", "misspecification")
    assert any(c.name.startswith("lowess_no_false_alarm") for c in checks)


def test_criterion_08_hurdle(say):
    _run_checks(say, 8, "hurdle", "hurdle")


def test_criterion_09_overdispersion(say):
    _run_checks(say, 9, "overdispersion", "overdispersion")


def test_criterion_10_wine(say, wine_csv, tmp_path):
    if wine_csv is None:
        say(10, "wine case study", None, "wine CSV not found; set FUNCRESID_WINE_CSV")
        pytest.skip("wine CSV not available")
    rep = wine_pipeline(wine_csv, output_dir=tmp_path / "wine")
    s1, s2, s3 = rep.stages
    drop = s2.aic - s3.aic
    # 150..220 widened by the 25-point tolerance for the unspecified outlier rows
    lo, hi = 150.0 - 25.0, 220.0 + 25.0
    ok = bool(s1.fit["converged"]) and lo <= drop <= hi
    say(
        10, "wine case study", ok,
        f"stage1 converged={s1.fit['converged']}; AIC {s2.aic:.1f} -> {s3.aic:.1f}, "
        f"drop {drop:.1f} in [{lo:g}, {hi:g}]; rows used {rep.n_used}",
    )
    assert ok


def test_criterion_11_bike(say, bike_csv, tmp_path):
    if bike_csv is None:
        say(11, "bike case study", None, "bike CSV not found; set FUNCRESID_BIKE_CSV")
        pytest.skip("bike CSV not available")
    rep = bike_pipeline(bike_csv, output_dir=tmp_path / "bike")
    s1, s2, s3 = rep.stages
    coef = {r["term"]: r["estimate"] for r in s1.fit["coefficients"]}
    target = {"winter": -0.323, "workingday": 0.061, "weather": -0.025}
    coef_ok = all(abs(coef[k] - v) <= 0.01 for k, v in target.items())
    sup = [s.sup_dev for s in rep.stages]
    ok = coef_ok and s3.dispersion > 20 and sup[0] > sup[1] > sup[2]
    say(
        11, "bike case study", ok,
        "; ".join(f"{k} {coef[k]:.4f} vs {v}" for k, v in target.items())
        + f"; dispersion {s3.dispersion:.2f} > 20; sup_dev "
        + " > ".join(f"{v:.4f}" for v in sup)
        + f"; rows used {rep.n_used}",
    )
    assert ok


def test_criterion_12_exactness(say):
    _run_checks(say, 12, "average-curve exactness", "exactness")
