"""Maximum-likelihood fitting of discrete regression families.

Every fitted model exposes its cumulative distribution ``Pr{Y <= y | x}``
through :meth:`FittedModel.cdf`; the functional residuals are built on top
of that single method.

Families
--------
``binary-logit``        logit Pr{Y=1} = x b
``cumulative-link``     G^{-1}(Pr{Y <= j}) = a_j - x b, G in {logit, probit, cloglog}
``adjacent-category``   log(p_j / p_{j+1}) = a_j + x b
``poisson``             log E[Y] = x b
``quasi-poisson``       Poisson mean model, variance = dispersion * mean (gamma-mixed
                        Poisson with constant variance-to-mean ratio for the CDF)
``hurdle-poisson``      logit Pr{Y=0} = z g, positives zero-truncated Poisson(exp(x b))
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import linalg, special, stats

from .core import Dataset, RngStream, TermSet, design_matrix, parse_terms

__all__ = [
    "FAMILIES",
    "LINKS",
    "ModelSpec",
    "FittedModel",
    "FitError",
    "RankDeficientError",
    "SeparationError",
    "fit",
    "known_model",
    "cumulative_prob",
    "adjacent_category_probs",
    "hurdle_cdf",
    "hurdle_cumulative",
    "nb1_cdf",
    "quasipoisson_cumulative",
    "zero_truncated_poisson",
]

FAMILIES = (
    "binary-logit",
    "cumulative-link",
    "adjacent-category",
    "poisson",
    "quasi-poisson",
    "hurdle-poisson",
)
ORDINAL = ("cumulative-link", "adjacent-category")
LINKS = ("logit", "probit", "cloglog")


class FitError(RuntimeError):
    pass


class RankDeficientError(FitError):
    pass


class SeparationError(FitError):
    pass


class ConvergenceWarning(UserWarning):
    pass


# ------------------------------------------------------------------ #
# Specification
# ------------------------------------------------------------------ #


@dataclass(frozen=True)
class ModelSpec:
    """What to fit.

    ``max_category`` is J for ordinal families (outcomes coded 0..J); when
    left as ``None`` it is taken from the data. Binary and count families get
    an intercept column unless ``intercept=False``; ordinal families never
    carry one because the cutpoints play that role.
    """

    family: str
    terms: TermSet | str = field(default_factory=TermSet)
    link: str | None = None
    max_category: int | None = None
    zero_terms: TermSet | str | None = None
    intercept: bool = True

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        terms = parse_terms(self.terms) if isinstance(self.terms, str) else self.terms
        zero = parse_terms(self.zero_terms) if isinstance(self.zero_terms, str) else self.zero_terms
        if self.family in ORDINAL:
            terms = terms.without_intercept()
            if self.max_category is not None and self.max_category < 2:
                raise ValueError("ordinal families need J >= 2")
        elif self.intercept:
            terms = terms.with_intercept()
        if self.family == "cumulative-link":
            link = self.link or "logit"
            if link not in LINKS:
                raise ValueError(f"unknown link {link!r}")
            object.__setattr__(self, "link", link)
        if self.family == "hurdle-poisson":
            if zero is None:
                zero = terms
            if self.intercept:
                zero = zero.with_intercept()
        else:
            zero = None
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "zero_terms", zero)

    @property
    def is_ordinal(self) -> bool:
        return self.family in ORDINAL

    def describe(self) -> str:
        out = self.family
        if self.link:
            out += f"[{self.link}]"
        out += f": {self.terms.describe()}"
        if self.zero_terms is not None:
            out += f" | zero: {self.zero_terms.describe()}"
        return out


# ------------------------------------------------------------------ #
# Link functions for cumulative models
# ------------------------------------------------------------------ #


def _link_fns(link: str):
    """Return (G, survival 1-G, density g, derivative g') for an inverse link."""
    L = _log_link_fns(link)
    G = lambda u: np.exp(L[0](u))  # noqa: E731
    S = lambda u: np.exp(L[1](u))  # noqa: E731
    g = lambda u: np.exp(L[2](u))  # noqa: E731
    gp = lambda u: g(u) * L[3](u)  # noqa: E731
    return G, S, g, gp


def _log_link_fns(link: str):
    """Return (log G, log(1-G), log g, g'/g); all finite for finite arguments."""
    if link == "logit":

        def logG(u):
            return special.log_expit(u)

        def logS(u):
            return special.log_expit(-u)

        def logg(u):
            return special.log_expit(u) + special.log_expit(-u)

        def dlogg(u):
            return 1.0 - 2.0 * special.expit(u)

    elif link == "probit":

        def logG(u):
            return special.log_ndtr(u)

        def logS(u):
            return special.log_ndtr(-u)

        def logg(u):
            return -0.5 * u * u - 0.5 * np.log(2 * np.pi)

        def dlogg(u):
            return -u

    elif link == "cloglog":

        def logG(u):
            with np.errstate(over="ignore"):
                return np.log(-np.expm1(-np.exp(u)))

        def logS(u):
            with np.errstate(over="ignore"):
                return -np.exp(u)

        def logg(u):
            with np.errstate(over="ignore"):
                return u - np.exp(u)

        def dlogg(u):
            with np.errstate(over="ignore"):
                return 1.0 - np.exp(u)

    else:
        raise ValueError(f"unknown link {link!r}")
    return logG, logS, logg, dlogg


def inverse_link_quantile(link: str, p: ArrayLike) -> NDArray:
    """G^{-1}: quantile function of the latent error distribution."""
    p = np.asarray(p, dtype=float)
    if link == "logit":
        return special.logit(p)
    if link == "probit":
        return special.ndtri(p)
    if link == "cloglog":
        return np.log(-np.log1p(-p))
    raise ValueError(f"unknown link {link!r}")


# ------------------------------------------------------------------ #
# Distribution helpers
# ------------------------------------------------------------------ #


def adjacent_category_probs(alpha: ArrayLike, beta: ArrayLike, x: ArrayLike) -> NDArray:
    """Category probabilities of the adjacent-category logit model.

    ``log(p_j / p_{j+1}) = alpha_j + x @ beta`` for ``j = 0..J-1``. ``x`` is a
    single design row (result has shape ``(J+1,)``) or an ``n x q`` matrix.
    """
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1
    X = np.atleast_2d(x) if x.ndim == 1 else x.reshape(-1, 1) if x.ndim == 0 else x
    if X.shape[1] != len(beta):
        X = X.reshape(-1, len(beta))
    eta = X @ beta
    return _adjacent_probs_from_eta(alpha, eta)[0] if single else _adjacent_probs_from_eta(alpha, eta)


def _adjacent_logits(alpha: NDArray, eta: NDArray) -> NDArray:
    """Log-probabilities up to a constant; reference category J has logit 0."""
    J = len(alpha)
    tail = np.concatenate([np.cumsum(alpha[::-1])[::-1], [0.0]])  # sum_{k>=j} alpha_k
    steps = (J - np.arange(J + 1)).astype(float)
    return tail[None, :] + eta[:, None] * steps[None, :]


def _adjacent_probs_from_eta(alpha: NDArray, eta: NDArray) -> NDArray:
    logits = _adjacent_logits(alpha, np.atleast_1d(eta))
    return np.exp(logits - special.logsumexp(logits, axis=1, keepdims=True))


def hurdle_cdf(y: ArrayLike, p0: ArrayLike, mu: ArrayLike) -> NDArray:
    """CDF of a logistic-zero / zero-truncated-Poisson hurdle distribution."""
    y = np.asarray(y)
    p0 = np.asarray(p0, dtype=float)
    mu = np.asarray(mu, dtype=float)
    y, p0, mu = np.broadcast_arrays(y, p0, mu)
    out = np.where(y < 0, 0.0, p0).astype(float)
    pos = y >= 1
    if np.any(pos):
        m = mu[pos]
        # F_T(y) = (F(y) - F(0)) / (1 - F(0)), written with survival functions
        trunc = 1.0 - stats.poisson.sf(y[pos], m) / -np.expm1(-m)
        out[pos] = p0[pos] + (1.0 - p0[pos]) * np.clip(trunc, 0.0, 1.0)
    return out


def nb1_cdf(y: ArrayLike, mu: ArrayLike, dispersion: float) -> NDArray:
    """CDF of the gamma-mixed Poisson with mean ``mu`` and variance ``dispersion * mu``.

    Reduces to the Poisson CDF when ``dispersion <= 1``.
    """
    y = np.asarray(y)
    mu = np.asarray(mu, dtype=float)
    if dispersion <= 1.0:
        return stats.poisson.cdf(y, mu)
    size = mu / (dispersion - 1.0)
    return stats.nbinom.cdf(y, size, 1.0 / dispersion)


def zero_truncated_poisson(mu: ArrayLike, stream: RngStream) -> NDArray:
    """Draw from Poisson(mu) conditioned on Y >= 1 by exact inversion."""
    mu = np.asarray(mu, dtype=float)
    if np.any(mu <= 0):
        raise ValueError("zero-truncated Poisson needs mu > 0")
    u = stream.uniform(size=mu.shape)
    p_zero = np.exp(-mu)
    target = p_zero + u * -np.expm1(-mu)
    y = stats.poisson.ppf(target, mu)
    return np.maximum(y, 1).astype(np.int64)


# ------------------------------------------------------------------ #
# Fitted model
# ------------------------------------------------------------------ #


@dataclass(frozen=True)
class FittedModel:
    """Estimates plus everything needed to evaluate Pr{Y <= y | x} on new rows.

    ``beta`` holds the coefficients of the design columns (including the
    intercept column for binary and count families; for ``hurdle-poisson``
    the positive-count part). ``alpha`` holds ordinal cutpoints. ``vcov`` is
    ordered as ``param_names``.
    """

    spec: ModelSpec
    terms: TermSet
    names: tuple[str, ...]
    beta: NDArray
    alpha: NDArray | None
    zero_beta: NDArray | None
    dispersion: float
    loglik: float
    vcov: NDArray
    param_names: tuple[str, ...]
    iterations: int
    converged: bool
    grad_norm: float
    n: int
    max_category: int | None = None
    zero_terms: TermSet | None = None
    dispersion_fallback: bool = False

    @property
    def family(self) -> str:
        return self.spec.family

    @property
    def params(self) -> NDArray:
        parts = [p for p in (self.alpha, self.zero_beta, self.beta) if p is not None]
        return np.concatenate(parts)

    @property
    def se(self) -> NDArray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0, None))

    @property
    def n_params(self) -> int:
        return len(self.params)

    @property
    def aic(self) -> float | None:
        if self.family == "quasi-poisson":
            return None
        return -2.0 * self.loglik + 2.0 * self.n_params

    # -------------------------------------------------------------- #

    def _as_dataset(self, X) -> Dataset:
        if isinstance(X, Dataset):
            return X
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :] if len(self.names) > 1 or X.size == 1 else X[:, None]
        return Dataset(np.zeros(X.shape[0], dtype=np.int64), X, self.names)

    def design(self, X) -> NDArray:
        return design_matrix(self._as_dataset(X), self.terms)

    def linear_predictor(self, X) -> NDArray:
        return self.design(X) @ self.beta

    def zero_probability(self, X) -> NDArray:
        """Hurdle models: Pr{Y = 0 | x}."""
        if self.zero_terms is None:
            raise ValueError("not a hurdle model")
        Z = design_matrix(self._as_dataset(X), self.zero_terms)
        return special.expit(Z @ self.zero_beta)

    def mean(self, X) -> NDArray:
        """E[Y | x] for binary and count families."""
        eta = self.linear_predictor(X)
        fam = self.family
        if fam == "binary-logit":
            return special.expit(eta)
        if fam in ("poisson", "quasi-poisson"):
            return np.exp(eta)
        if fam == "hurdle-poisson":
            mu = np.exp(eta)
            return (1 - self.zero_probability(X)) * mu / -np.expm1(-mu)
        raise ValueError(f"mean is not defined for {fam}")

    def category_probs(self, X) -> NDArray:
        """``n x (J+1)`` probability matrix for ordinal (and binary) families."""
        fam = self.family
        if fam == "binary-logit":
            p1 = special.expit(self.linear_predictor(X))
            return np.column_stack([1 - p1, p1])
        if fam == "adjacent-category":
            return _adjacent_probs_from_eta(self.alpha, self.linear_predictor(X))
        if fam == "cumulative-link":
            F = self._cumlink_cdf_matrix(self.linear_predictor(X))
            return np.diff(np.column_stack([np.zeros(len(F)), F]), axis=1)
        raise ValueError(f"category probabilities are not defined for {fam}")

    def _cumlink_cdf_matrix(self, eta: NDArray) -> NDArray:
        G, _, _, _ = _link_fns(self.spec.link)
        F = G(self.alpha[None, :] - eta[:, None])
        return np.column_stack([F, np.ones(len(eta))])

    @property
    def support_max(self) -> float:
        if self.family == "binary-logit":
            return 1
        if self.spec.is_ordinal:
            return self.max_category
        return np.inf

    def cdf(self, y: ArrayLike, X) -> NDArray:
        """Pr{Y <= y | x} row-wise; ``y = -1`` gives 0."""
        data = self._as_dataset(X)
        y = np.broadcast_to(np.asarray(y, dtype=np.int64), (data.n,))
        if np.any(y < -1):
            raise ValueError("y must be >= -1")
        if np.any(y > self.support_max):
            raise ValueError(f"y exceeds the largest category {self.support_max}")
        fam = self.family
        if fam in ("binary-logit", "adjacent-category", "cumulative-link"):
            if fam == "cumulative-link":
                F = self._cumlink_cdf_matrix(self.linear_predictor(data))
            else:
                F = np.cumsum(self.category_probs(data), axis=1)
                F[:, -1] = 1.0
            F = np.column_stack([np.zeros(data.n), F])
            return np.clip(F[np.arange(data.n), y + 1], 0.0, 1.0)
        mu = np.exp(self.linear_predictor(data))
        if fam == "poisson":
            return stats.poisson.cdf(y, mu)
        if fam == "quasi-poisson":
            return nb1_cdf(y, mu, self.dispersion)
        if fam == "hurdle-poisson":
            return hurdle_cdf(y, self.zero_probability(data), mu)
        raise AssertionError(fam)  # pragma: no cover

    def sample(self, X, stream: RngStream) -> NDArray:
        """Simulate outcomes from the fitted distribution at rows ``X``."""
        data = self._as_dataset(X)
        fam = self.family
        if fam in ("binary-logit", "adjacent-category", "cumulative-link"):
            P = np.clip(self.category_probs(data), 0, None)
            return stream.categorical(P / P.sum(axis=1, keepdims=True))
        mu = np.exp(self.linear_predictor(data))
        if fam == "poisson" or (fam == "quasi-poisson" and self.dispersion <= 1):
            return stream.poisson(mu)
        if fam == "quasi-poisson":
            phi = 1.0 / (self.dispersion - 1.0)
            lam = stream.gamma(mu * phi, phi)
            return stream.poisson(lam)
        if fam == "hurdle-poisson":
            zero = stream.bernoulli(self.zero_probability(data)).astype(bool)
            y = zero_truncated_poisson(mu, stream)
            return np.where(zero, 0, y)
        raise AssertionError(fam)  # pragma: no cover

    # -------------------------------------------------------------- #

    def summary(self) -> dict:
        se = self.se
        params = self.params
        rows = [
            {"term": name, "estimate": float(est), "se": float(s)}
            for name, est, s in zip(self.param_names, params, se)
        ]
        out = {
            "family": self.family,
            "link": self.spec.link,
            "model": self.spec.describe(),
            "n": self.n,
            "terms": list(self.param_names),
            "coefficients": rows,
            "loglik": float(self.loglik),
            "aic": None if self.aic is None else float(self.aic),
            "dispersion": float(self.dispersion),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "grad_norm": float(self.grad_norm),
        }
        if self.family == "adjacent-category":
            out["sign_convention"] = "log(p_j/p_{j+1}) = alpha_j + x*beta"
        elif self.family == "cumulative-link":
            out["sign_convention"] = "G^{-1}(P(Y<=j)) = alpha_j - x*beta"
        if self.dispersion_fallback:
            out["warning"] = "estimated dispersion < 1; Poisson CDF used"
        return out

    def to_json(self, **kw) -> str:
        return json.dumps(self.summary(), **kw)


def cumulative_prob(model: FittedModel, y: ArrayLike, x: ArrayLike) -> NDArray | float:
    """Pr{Y <= y | x}; scalar in, scalar out."""
    x = np.asarray(x, dtype=float)
    scalar = np.ndim(y) == 0 and x.ndim <= 1
    if x.ndim <= 1:
        x = x.reshape(1, -1)
    out = model.cdf(y, x)
    return float(out[0]) if scalar else out


def hurdle_cumulative(model: FittedModel, y: ArrayLike, x: ArrayLike):
    if model.family != "hurdle-poisson":
        raise ValueError("model is not a hurdle model")
    return cumulative_prob(model, y, x)


def quasipoisson_cumulative(model: FittedModel, y: ArrayLike, x: ArrayLike):
    if model.family != "quasi-poisson":
        raise ValueError("model is not a quasi-Poisson model")
    return cumulative_prob(model, y, x)


# ------------------------------------------------------------------ #
# Log-likelihoods: each returns (ll, grad, hess) or ll only
# ------------------------------------------------------------------ #


def _logit_llh(theta, X, y, derivs):
    eta = X @ theta
    ll = np.sum(y * eta - np.logaddexp(0.0, eta))
    if not derivs:
        return ll
    p = special.expit(eta)
    g = X.T @ (y - p)
    H = -(X.T * (p * (1 - p))) @ X
    return ll, g, H


def _poisson_llh(theta, X, y, derivs):
    eta = X @ theta
    with np.errstate(over="ignore"):
        mu = np.exp(eta)
    ll = np.sum(y * eta - mu - special.gammaln(y + 1))
    if not derivs:
        return ll
    g = X.T @ (y - mu)
    H = -(X.T * mu) @ X
    return ll, g, H


def _truncpois_llh(theta, X, y, derivs):
    eta = X @ theta
    with np.errstate(over="ignore"):
        mu = np.exp(eta)
    log_norm = np.log(-np.expm1(-mu))
    ll = np.sum(y * eta - mu - special.gammaln(y + 1) - log_norm)
    if not derivs:
        return ll
    h = mu / -np.expm1(-mu)
    var = h * (1.0 + mu - h)
    g = X.T @ (y - h)
    H = -(X.T * var) @ X
    return ll, g, H


def _adjacent_llh(theta, X, y, J, derivs):
    alpha, beta = theta[:J], theta[J:]
    eta = X @ beta
    logits = _adjacent_logits(alpha, eta)
    lse = special.logsumexp(logits, axis=1)
    n = len(y)
    ll = np.sum(logits[np.arange(n), y] - lse)
    if not derivs:
        return ll
    P = np.exp(logits - lse[:, None])
    F = np.cumsum(P, axis=1)[:, :J]  # Pr{Y <= k}, k = 0..J-1
    steps = (J - np.arange(J + 1)).astype(float)
    Es = P @ steps
    Es2 = P @ steps**2
    # E[1{Y<=k} * (J - Y)]
    Ecs = np.cumsum(P * steps, axis=1)[:, :J]
    ind = (y[:, None] <= np.arange(J)[None, :]).astype(float)
    g_alpha = np.sum(ind - F, axis=0)
    g_beta = X.T @ ((J - y) - Es)
    Fmin = F[:, np.minimum.outer(np.arange(J), np.arange(J))]
    cov_cc = Fmin - F[:, :, None] * F[:, None, :]
    cov_cs = Ecs - F * Es[:, None]
    var_s = Es2 - Es**2
    H_aa = -cov_cc.sum(axis=0)
    H_ab = -(cov_cs.T @ X)
    H_bb = -(X.T * var_s) @ X
    g = np.concatenate([g_alpha, g_beta])
    H = np.block([[H_aa, H_ab], [H_ab.T, H_bb]])
    return ll, g, H


def _log_diff(la: NDArray, lb: NDArray) -> NDArray:
    """log(exp(la) - exp(lb)) for la >= lb; -inf where equal."""
    with np.errstate(divide="ignore", invalid="ignore"):
        return la + np.log1p(-np.exp(lb - la))


def _cumlink_alpha_llh(alpha, beta, X, y, J, link, derivs):
    """Cumulative-link log-likelihood in the natural (alpha, beta) parameters.

    Cell probabilities are formed in log space from whichever tail is
    smaller, so extreme linear predictors do not underflow to zero.
    """
    logG, logS, logg, dlogg = _log_link_fns(link)
    n = len(y)
    eta = X @ beta
    a_ext = np.concatenate([[-np.inf], alpha, [np.inf]])
    u_hi = a_ext[y + 1] - eta
    u_lo = a_ext[y] - eta
    fin_hi = np.isfinite(u_hi)
    fin_lo = np.isfinite(u_lo)
    uh = np.where(fin_hi, u_hi, 0.0)
    ul = np.where(fin_lo, u_lo, 0.0)
    upper = fin_lo & (u_lo > 0)
    # upper tail: S(u_lo) - S(u_hi); otherwise G(u_hi) - G(u_lo)
    lS_lo = np.where(fin_lo, logS(ul), 0.0)
    lS_hi = np.where(fin_hi, logS(uh), -np.inf)
    lG_hi = np.where(fin_hi, logG(uh), 0.0)
    lG_lo = np.where(fin_lo, logG(ul), -np.inf)
    logP = np.where(upper, _log_diff(lS_lo, lS_hi), _log_diff(lG_hi, lG_lo))
    ll = float(np.sum(logP)) if np.all(np.isfinite(logP)) else -np.inf
    if not derivs:
        return ll
    with np.errstate(over="ignore", invalid="ignore"):
        w_hi = np.where(fin_hi, np.exp(logg(uh) - logP), 0.0)
        w_lo = np.where(fin_lo, np.exp(logg(ul) - logP), 0.0)
    c_hi = w_hi * np.where(fin_hi, dlogg(uh), 0.0)
    c_lo = w_lo * np.where(fin_lo, dlogg(ul), 0.0)
    q = X.shape[1]
    V_hi = np.zeros((n, J + q))
    V_lo = np.zeros((n, J + q))
    rows = np.arange(n)
    V_hi[rows[fin_hi], y[fin_hi]] = 1.0
    V_lo[rows[fin_lo], y[fin_lo] - 1] = 1.0
    V_hi[:, J:] = -X
    V_lo[:, J:] = -X
    D = w_hi[:, None] * V_hi - w_lo[:, None] * V_lo
    grad = D.sum(axis=0)
    H = (V_hi.T * c_hi) @ V_hi - (V_lo.T * c_lo) @ V_lo - D.T @ D
    return ll, grad, H


def _gaps_to_alpha(gamma: NDArray) -> NDArray:
    return gamma[0] + np.concatenate([[0.0], np.cumsum(np.exp(gamma[1:]))])


def _cumlink_llh(theta, X, y, J, link, derivs):
    gamma, beta = theta[:J], theta[J:]
    alpha = _gaps_to_alpha(gamma)
    if not derivs:
        return _cumlink_alpha_llh(alpha, beta, X, y, J, link, False)
    ll, g_a, H_a = _cumlink_alpha_llh(alpha, beta, X, y, J, link, True)
    e = np.exp(gamma[1:])
    M = np.zeros((J, J))
    M[:, 0] = 1.0
    for m in range(1, J):
        M[m:, m] = e[m - 1]
    q = len(beta)
    T = linalg.block_diag(M, np.eye(q))
    grad = T.T @ g_a
    H = T.T @ H_a @ T
    tail = np.cumsum(g_a[:J][::-1])[::-1]  # sum_{k>=m} dl/dalpha_k
    H[np.arange(1, J), np.arange(1, J)] += e * tail[1:]
    return ll, grad, H


# ------------------------------------------------------------------ #
# Newton driver
# ------------------------------------------------------------------ #


def _newton(fun: Callable, theta: NDArray, n: int, max_iter: int = 100, tol: float = 1e-8):
    """Newton-Raphson with step halving; gradient ascent when -H is not PD."""
    ll, g, H = fun(theta, True)
    if not np.isfinite(ll):
        raise FitError("log-likelihood is not finite at the starting values")
    it = 0
    for it in range(1, max_iter + 1):
        if np.linalg.norm(g) / n < tol:
            return theta, ll, g, H, it - 1, True
        try:
            chol = linalg.cho_factor(-H)
            d = linalg.cho_solve(chol, g)
        except linalg.LinAlgError:
            d = g / max(np.abs(np.diag(H)).max(), 1e-8)
        step = 1.0
        slack = 1e-12 * max(1.0, abs(ll))
        for _ in range(50):
            cand = theta + step * d
            ll_new = fun(cand, False)
            if np.isfinite(ll_new) and ll_new >= ll - slack:
                break
            step *= 0.5
        else:
            break
        theta = cand
        if np.linalg.norm(theta) > 1e3:
            raise SeparationError(
                "coefficient norm exceeded 1e3; the data are likely completely separated"
            )
        ll, g, H = fun(theta, True)
    return theta, ll, g, H, it, bool(np.linalg.norm(g) / n < tol)


# ------------------------------------------------------------------ #
# Fitting
# ------------------------------------------------------------------ #


def _standardize(X: NDArray, center: bool):
    """Column centering/scaling used internally for conditioning."""
    m = X.mean(axis=0)
    s = X.std(axis=0)
    const = s < 1e-12 * np.maximum(1.0, np.abs(m))
    m = np.where(const | (not center), 0.0, m)
    s = np.where(const, 1.0, s)
    return (X - m) / s, m, s


def _check_rank(X: NDArray, with_constant: bool) -> None:
    M = np.column_stack([np.ones(len(X)), X]) if with_constant else X
    if M.shape[1] == 0:
        return
    if M.shape[0] < M.shape[1] or np.linalg.matrix_rank(M) < M.shape[1]:
        raise RankDeficientError("design matrix is rank deficient")


def _coef_map(m: NDArray, s: NDArray, intercept_col: int | None) -> NDArray:
    """Matrix A with b_original = A @ b_standardized for an intercept-bearing block."""
    q = len(m)
    A = np.diag(1.0 / s)
    if intercept_col is not None:
        A[intercept_col, :] -= m / s
        A[intercept_col, intercept_col] = 1.0
    return A


def _intercept_col(terms: TermSet, X: NDArray) -> int | None:
    if not terms.has_intercept:
        return None
    labels = terms.labels()
    return labels.index("(Intercept)")


def _fit_glm(llh, X, y, terms, init_intercept, max_iter, tol):
    icol = _intercept_col(terms, X)
    _check_rank(X, with_constant=False)
    Xs, m, s = _standardize(X, center=icol is not None)
    if icol is not None:
        Xs[:, icol] = 1.0
        m[icol], s[icol] = 0.0, 1.0
    theta0 = np.zeros(X.shape[1])
    if icol is not None:
        theta0[icol] = init_intercept
    fun = lambda th, d: llh(th, Xs, y, d)  # noqa: E731
    th, ll, g, H, it, conv = _newton(fun, theta0, len(y), max_iter, tol)
    A = _coef_map(m, s, icol)
    beta = A @ th
    vcov = A @ _safe_inv(-H) @ A.T
    g_orig = np.linalg.solve(A.T, g)
    return beta, ll, vcov, it, conv, np.linalg.norm(g_orig) / len(y)


def _check_separation(X: NDArray, beta: NDArray, y: NDArray) -> None:
    """Complete separation: the fitted linear predictor classifies every row.

    A hyperplane that separates the outcomes means scaling it up always
    raises the likelihood, so no finite maximum exists.
    """
    eta = X @ beta
    if np.all(np.where(y > 0.5, eta > 0, eta < 0)):
        raise SeparationError(
            "fitted probabilities are numerically 0 or 1 for every row; "
            "the outcome is completely separated by the covariates"
        )


def _safe_inv(M: NDArray) -> NDArray:
    try:
        return linalg.inv(M)
    except linalg.LinAlgError:
        return linalg.pinv(M)


def known_model(
    spec: ModelSpec,
    names: tuple[str, ...] | list[str],
    beta: ArrayLike,
    alpha: ArrayLike | None = None,
    zero_beta: ArrayLike | None = None,
    dispersion: float = 1.0,
    max_category: int | None = None,
) -> FittedModel:
    """A model with fixed, known parameters (the data-generating truth in simulations).

    Terms must not need data to be bound, so splines without explicit knots
    and bounds are rejected.
    """
    names = tuple(names)
    spec.terms.validate(names)
    beta = np.asarray(beta, dtype=float)
    if len(beta) != len(spec.terms.labels()):
        raise ValueError(f"expected {len(spec.terms.labels())} coefficients, got {len(beta)}")
    labels = list(spec.terms.labels())
    zterms = None
    if spec.is_ordinal:
        if alpha is None:
            raise ValueError("ordinal models need cutpoints")
        alpha = np.asarray(alpha, dtype=float)
        max_category = len(alpha)
        labels = [f"alpha[{j}]" for j in range(max_category)] + labels
    elif spec.family == "binary-logit":
        max_category = 1
    if spec.family == "hurdle-poisson":
        if zero_beta is None:
            raise ValueError("hurdle models need zero-part coefficients")
        zero_beta = np.asarray(zero_beta, dtype=float)
        zterms = spec.zero_terms
        zterms.validate(names)
        if len(zero_beta) != len(zterms.labels()):
            raise ValueError("zero-part coefficient count does not match its terms")
        labels = [f"zero:{lab}" for lab in zterms.labels()] + [f"count:{lab}" for lab in labels]
    if spec.family == "quasi-poisson" and dispersion <= 0:
        raise ValueError("dispersion must be positive")
    for t in list(spec.terms) + list(zterms or ()):
        if getattr(t, "knots", ()) is None:
            raise ValueError("spline terms need explicit knots and bounds in a known model")
    k = len(labels)
    return FittedModel(
        spec=spec, terms=spec.terms, names=names, beta=beta,
        alpha=alpha if spec.is_ordinal else None, zero_beta=zero_beta, dispersion=float(dispersion),
        loglik=float("nan"), vcov=np.zeros((k, k)), param_names=tuple(labels), iterations=0,
        converged=True, grad_norm=0.0, n=0, max_category=max_category, zero_terms=zterms,
    )


def fit(spec: ModelSpec, data: Dataset, max_iter: int = 100, tol: float = 1e-8) -> FittedModel:
    """Maximum-likelihood fit of ``spec`` to ``data``.

    Raises :class:`RankDeficientError` for a singular design and
    :class:`SeparationError` when coefficients diverge. Non-convergence after
    ``max_iter`` Newton steps returns a model with ``converged=False`` and a
    :class:`ConvergenceWarning`.
    """
    terms = spec.terms.bind(data)
    X = design_matrix(data, terms)
    y = data.y
    n = data.n
    fam = spec.family
    labels = terms.labels()
    common = dict(spec=spec, terms=terms, names=data.names, n=n)

    if fam == "binary-logit":
        if np.any(y > 1):
            raise ValueError("binary outcomes must be 0 or 1")
        ybar = np.clip(y.mean(), 1e-6, 1 - 1e-6)
        beta, ll, vcov, it, conv, gn = _fit_glm(
            _logit_llh, X, y.astype(float), terms, special.logit(ybar), max_iter, tol
        )
        _check_separation(X, beta, y)
        model = FittedModel(
            beta=beta, alpha=None, zero_beta=None, dispersion=1.0, loglik=ll, vcov=vcov,
            param_names=tuple(labels), iterations=it, converged=conv, grad_norm=gn,
            max_category=1, **common,
        )

    elif fam in ("poisson", "quasi-poisson"):
        yf = y.astype(float)
        beta, ll, vcov, it, conv, gn = _fit_glm(
            _poisson_llh, X, yf, terms, np.log(max(yf.mean(), 1e-8)), max_iter, tol
        )
        dispersion, fallback = 1.0, False
        if fam == "quasi-poisson":
            mu = np.exp(X @ beta)
            dof = n - X.shape[1]
            if dof <= 0:
                raise FitError("quasi-Poisson needs n > number of coefficients")
            dispersion = float(np.sum((yf - mu) ** 2 / mu) / dof)
            vcov = vcov * dispersion
            if dispersion < 1.0:
                fallback = True
                warnings.warn(
                    f"estimated dispersion {dispersion:.3f} < 1; residuals use the Poisson CDF",
                    stacklevel=2,
                )
        model = FittedModel(
            beta=beta, alpha=None, zero_beta=None, dispersion=dispersion, loglik=ll,
            vcov=vcov, param_names=tuple(labels), iterations=it, converged=conv,
            grad_norm=gn, dispersion_fallback=fallback, **common,
        )

    elif fam == "hurdle-poisson":
        zterms = spec.zero_terms.bind(data)
        Z = design_matrix(data, zterms)
        zero = (y == 0).astype(float)
        pbar = np.clip(zero.mean(), 1e-6, 1 - 1e-6)
        zb, ll0, V0, it0, c0, gn0 = _fit_glm(
            _logit_llh, Z, zero, zterms, special.logit(pbar), max_iter, tol
        )
        _check_separation(Z, zb, zero)
        pos = y > 0
        if pos.sum() == 0:
            raise FitError("hurdle model needs at least one positive count")
        Xp, yp = X[pos], y[pos].astype(float)
        b, ll1, V1, it1, c1, gn1 = _fit_glm(
            _truncpois_llh, Xp, yp, terms, np.log(max(yp.mean() - 1.0, 0.1)), max_iter, tol
        )
        names = [f"zero:{lab}" for lab in zterms.labels()] + [f"count:{lab}" for lab in labels]
        model = FittedModel(
            beta=b, alpha=None, zero_beta=zb, dispersion=1.0, loglik=ll0 + ll1,
            vcov=linalg.block_diag(V0, V1), param_names=tuple(names),
            iterations=it0 + it1, converged=c0 and c1, grad_norm=max(gn0, gn1 * pos.sum() / n),
            zero_terms=zterms, **common,
        )

    else:
        model = _fit_ordinal(spec, data, X, terms, max_iter, tol)

    if not model.converged:
        warnings.warn(
            f"{fam} fit did not converge in {max_iter} iterations "
            f"(gradient norm / n = {model.grad_norm:.2e})",
            ConvergenceWarning,
            stacklevel=2,
        )
    return model


def _fit_ordinal(spec, data, X, terms, max_iter, tol) -> FittedModel:
    y = data.y
    n = data.n
    J = spec.max_category if spec.max_category is not None else int(y.max())
    if J < 2:
        raise ValueError("ordinal families need at least three categories (J >= 2)")
    if np.any(y > J):
        raise ValueError(f"outcomes exceed the declared maximum category {J}")
    counts = np.bincount(y, minlength=J + 1)
    if np.any(counts == 0):
        empty = np.flatnonzero(counts == 0).tolist()
        raise FitError(f"categories {empty} have no observations; cutpoints are not estimable")
    _check_rank(X, with_constant=True)
    Xs, m, s = _standardize(X, center=True)
    q = X.shape[1]
    cum = np.cumsum(counts)[:J] / n

    if spec.family == "adjacent-category":
        alpha0 = np.log(counts[:J] / counts[1:])
        theta0 = np.concatenate([alpha0, np.zeros(q)])
        fun = lambda th, d: _adjacent_llh(th, Xs, y, J, d)  # noqa: E731
        th, ll, g, H, it, conv = _newton(fun, theta0, n, max_iter, tol)
        alpha_s, beta_s = th[:J], th[J:]
        H_nat = H
        shift_sign = -1.0  # alpha = alpha_s - m.beta
    else:
        link = spec.link
        a0 = inverse_link_quantile(link, cum)
        gamma0 = np.concatenate([[a0[0]], np.log(np.diff(a0))])
        theta0 = np.concatenate([gamma0, np.zeros(q)])
        fun = lambda th, d: _cumlink_llh(th, Xs, y, J, link, d)  # noqa: E731
        th, ll, g, H, it, conv = _newton(fun, theta0, n, max_iter, tol)
        alpha_s, beta_s = _gaps_to_alpha(th[:J]), th[J:]
        _, g, H_nat = _cumlink_alpha_llh(alpha_s, beta_s, Xs, y, J, link, True)
        shift_sign = 1.0  # alpha = alpha_s + m.beta

    beta = beta_s / s
    alpha = alpha_s + shift_sign * float(m @ beta)
    A = np.zeros((J + q, J + q))
    A[:J, :J] = np.eye(J)
    A[:J, J:] = shift_sign * (m / s)[None, :]
    A[J:, J:] = np.diag(1.0 / s)
    vcov = A @ _safe_inv(-H_nat) @ A.T
    g_orig = np.linalg.solve(A.T, g)
    labels = [f"alpha[{j}]" for j in range(J)] + terms.labels()
    return FittedModel(
        spec=spec, terms=terms, names=data.names, beta=beta, alpha=alpha, zero_beta=None,
        dispersion=1.0, loglik=ll, vcov=vcov, param_names=tuple(labels), iterations=it,
        converged=conv, grad_norm=float(np.linalg.norm(g_orig) / n), n=n, max_category=J,
    )
