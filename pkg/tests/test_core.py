from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from funcresid.core import (
    Dataset,
    Intercept,
    Interaction,
    Linear,
    Power,
    RngStream,
    Spline,
    TermSet,
    design_matrix,
    parse_terms,
    std_normal_cdf,
    std_normal_quantile,
)


# --- design matrices -------------------------------------------------------


def test_design_polynomial_of_one():
    d = Dataset.from_columns([0], x=[1.0])
    M = design_matrix(d, TermSet((Intercept(), Linear("x"), Power("x", 2))))
    np.testing.assert_array_equal(M, [[1.0, 1.0, 1.0]])


def test_design_square():
    d = Dataset.from_columns([0], x=[2.0])
    np.testing.assert_array_equal(design_matrix(d, TermSet((Linear("x"), Power("x", 2)))), [[2.0, 4.0]])


def test_design_interaction():
    d = Dataset.from_columns([0], x1=[3.0], x2=[-1.0])
    np.testing.assert_array_equal(design_matrix(d, TermSet((Interaction("x1", "x2"),))), [[-3.0]])


def test_design_errors():
    d = Dataset.from_columns([0, 1], x=[1.0, 2.0])
    with pytest.raises(KeyError):
        design_matrix(d, parse_terms("z"))
    with pytest.raises(ValueError):
        Power("x", 1)
    with pytest.raises(ValueError):
        Spline("x", num_knots=0)


def test_parse_terms_round_trip():
    ts = parse_terms("1 + x + x^3 + a:b + bs(hour, 7, 3)")
    kinds = [type(t) for t in ts]
    assert kinds == [Intercept, Linear, Power, Interaction, Spline]
    assert ts.terms[2].k == 3
    assert ts.terms[4].num_knots == 7 and ts.terms[4].df == 10
    assert ts.columns() == {"x", "a", "b", "hour"}


def test_design_is_row_permutation_equivariant(rng):
    n = 200
    d = Dataset.from_columns(np.zeros(n, int), x=rng.normal(size=n), z=rng.normal(size=n))
    terms = parse_terms("1 + x + x^2 + x:z + z")
    perm = rng.permutation(n)
    np.testing.assert_array_equal(design_matrix(d, terms)[perm], design_matrix(d.subset(perm), terms))


def test_spline_basis_partition_of_unity(rng):
    x = rng.uniform(0, 10, 500)
    d = Dataset.from_columns(np.zeros(500, int), x=x)
    B = design_matrix(d, parse_terms("bs(x,4,3)"))
    assert B.shape == (500, 7)
    # the dropped first basis function completes the partition of unity
    assert np.all(B.sum(axis=1) <= 1 + 1e-12)
    bound = parse_terms("bs(x,4,3)").bind(d).terms[0]
    full = np.concatenate([[bound.bounds[0]], bound.knots, [bound.bounds[1]]])
    assert np.all(np.diff(full) > 0)
    np.testing.assert_allclose(bound.knots, np.quantile(x, [0.2, 0.4, 0.6, 0.8]))


def test_spline_knots_must_increase():
    d = Dataset.from_columns(np.zeros(20, int), x=np.r_[np.zeros(18), 1, 2])
    with pytest.raises(ValueError, match="strictly increasing"):
        design_matrix(d, parse_terms("bs(x,3,3)"))


# --- dataset ---------------------------------------------------------------


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset(np.array([0, 1]), np.zeros((3, 1)), ("x",))
    with pytest.raises(ValueError):
        Dataset(np.array([-1]), np.zeros((1, 1)), ("x",))
    with pytest.raises(ValueError):
        Dataset(np.array([0.5]), np.zeros((1, 1)), ("x",))
    with pytest.raises(ValueError):
        Dataset(np.array([0]), np.array([[np.nan]]), ("x",))


def test_dataset_from_csv_rejects_missing(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("y,x\n1,0.5\n0,\n")
    with pytest.raises(ValueError, match="missing"):
        Dataset.from_csv(p, "y")
    p.write_text("y;x\n1;0.5\n0;1.5\n")
    d = Dataset.from_csv(p, "y", delimiter=None)
    np.testing.assert_array_equal(d.column("x"), [0.5, 1.5])


# --- normal distribution ---------------------------------------------------


def test_normal_quantile_reference_values():
    # tabulated values of the standard normal quantile
    assert std_normal_quantile(0.99) == pytest.approx(2.3263478740, abs=1e-9)
    assert std_normal_quantile(0.999) == pytest.approx(3.0902323062, abs=1e-9)
    assert std_normal_cdf(0.0) == 0.5


def test_normal_quantile_domain():
    for p in (0.0, 1.0, -0.1, np.nan):
        with pytest.raises(ValueError):
            std_normal_quantile(p)


@given(st.floats(-6, 0))
def test_quantile_inverts_cdf_lower_tail(z):
    assert abs(std_normal_quantile(std_normal_cdf(z)) - z) < 1e-10


@given(st.floats(0, 6))
def test_quantile_inverts_cdf_upper_tail(z):
    # Phi(z) is stored with absolute spacing ~1.1e-16 near 1, which alone moves
    # the quantile by ulp(p) / phi(z); no implementation can beat that.
    p = std_normal_cdf(z)
    conditioning = np.spacing(p) / stats.norm.pdf(z)
    assert abs(std_normal_quantile(p) - z) < max(1e-10, 2 * conditioning)


@given(st.floats(1e-300, 1 - 1e-16))
def test_cdf_inverts_quantile(p):
    assert abs(std_normal_cdf(std_normal_quantile(p)) - p) <= 1e-15 + 8 * np.spacing(p)


def test_cdf_against_erfc_oracle():
    from math import erfc, sqrt

    for z in np.linspace(-8, 8, 161):
        assert abs(std_normal_cdf(z) - 0.5 * erfc(-z / sqrt(2))) < 1e-12


# --- rng -------------------------------------------------------------------


def test_rng_reproducible_and_independent():
    a = RngStream(7, 3).uniform(size=1000)
    b = RngStream(7, 3).uniform(size=1000)
    c = RngStream(7, 4).uniform(size=1000)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    # independence: the correlation of two streams is within noise
    assert abs(np.corrcoef(a, c)[0, 1]) < 4 / np.sqrt(1000)


def test_rng_substreams_distinct():
    s = RngStream(1, 2)
    assert s.substream(0).stream_id != s.substream(1).stream_id
    np.testing.assert_array_equal(s.substream(5).normal(size=5), RngStream(1, 2).substream(5).normal(size=5))


def test_rng_degenerate_samplers():
    s = RngStream(0)
    assert s.categorical([1.0, 0.0, 0.0]) == 0
    assert s.poisson(0.0) == 0
    assert np.all(s.categorical(np.tile([0, 0, 1.0], (10, 1))) == 2)


def test_rng_uniform_mean():
    u = RngStream(99).uniform(size=1_000_000)
    assert abs(u.mean() - 0.5) < 0.002


def test_rng_invalid_parameters():
    s = RngStream(0)
    with pytest.raises(ValueError):
        s.gamma(0.0)
    with pytest.raises(ValueError):
        s.poisson(-1.0)
    with pytest.raises(ValueError):
        s.bernoulli(1.5)
    with pytest.raises(ValueError):
        s.categorical([0.5, 0.6])


def test_categorical_frequencies():
    p = np.array([0.1, 0.2, 0.3, 0.4])
    draws = RngStream(5).categorical(np.tile(p, (100_000, 1)))
    freq = np.bincount(draws, minlength=4) / len(draws)
    # chi-square goodness of fit at a generous level
    chi = stats.chisquare(freq * len(draws), p * len(draws))
    assert chi.pvalue > 1e-4
