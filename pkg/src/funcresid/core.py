"""Datasets, model terms, design matrices, normal-distribution helpers and RNG streams."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import special
from scipy.interpolate import BSpline

__all__ = [
    "Dataset",
    "Intercept",
    "Linear",
    "Power",
    "Interaction",
    "Spline",
    "TermSet",
    "parse_terms",
    "design_matrix",
    "std_normal_cdf",
    "std_normal_quantile",
    "std_normal_pdf",
    "RngStream",
]


# ------------------------------------------------------------------ #
# Dataset
# ------------------------------------------------------------------ #


@dataclass(frozen=True)
class Dataset:
    """Discrete outcomes ``y`` with a matrix of named raw covariates ``X``."""

    y: NDArray[np.int64]
    X: NDArray[np.float64]
    names: tuple[str, ...]

    def __post_init__(self) -> None:
        y = np.asarray(self.y)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if y.ndim != 1:
            raise ValueError("y must be one-dimensional")
        if len(y) < 1:
            raise ValueError("dataset must contain at least one row")
        if X.shape[0] != len(y):
            raise ValueError(f"y has {len(y)} rows but X has {X.shape[0]}")
        if X.shape[1] != len(self.names):
            raise ValueError("number of column names does not match X")
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate column names")
        if not np.all(np.isfinite(X)):
            raise ValueError("covariates contain missing or non-finite values")
        if np.issubdtype(y.dtype, np.floating):
            if not np.all(np.isfinite(y)) or np.any(y != np.round(y)):
                raise ValueError("outcomes must be integers")
        if np.any(y < 0):
            raise ValueError("outcomes must be non-negative")
        object.__setattr__(self, "y", y.astype(np.int64))
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "names", tuple(self.names))

    @property
    def n(self) -> int:
        return len(self.y)

    def column(self, name: str) -> NDArray[np.float64]:
        try:
            return self.X[:, self.names.index(name)]
        except ValueError:
            raise KeyError(f"unknown column {name!r}") from None

    def subset(self, rows: ArrayLike) -> Dataset:
        rows = np.asarray(rows)
        return Dataset(self.y[rows], self.X[rows], self.names)

    def with_column(self, name: str, values: ArrayLike) -> Dataset:
        values = np.asarray(values, dtype=float).reshape(-1, 1)
        return Dataset(self.y, np.hstack([self.X, values]), self.names + (name,))

    @classmethod
    def from_columns(cls, y: ArrayLike, **columns: ArrayLike) -> Dataset:
        names = tuple(columns)
        X = np.column_stack([np.asarray(columns[k], dtype=float) for k in names])
        return cls(np.asarray(y), X, names)

    @classmethod
    def from_csv(
        cls,
        path: str | Path,
        outcome: str,
        columns: Sequence[str] | None = None,
        delimiter: str | None = ",",
    ) -> Dataset:
        """Read a delimited file with a header row.

        ``delimiter=None`` sniffs the separator (the UCI wine files use ``;``).
        Without ``columns`` every numeric column other than the outcome is kept.
        Rows with missing values are rejected, not dropped.
        """
        import pandas as pd

        if delimiter is None:
            frame = pd.read_csv(path, sep=None, engine="python")
        else:
            frame = pd.read_csv(path, sep=delimiter)
        return cls.from_frame(frame, outcome, columns)

    @classmethod
    def from_frame(cls, frame, outcome: str, columns: Sequence[str] | None = None) -> Dataset:
        if outcome not in frame.columns:
            raise KeyError(f"outcome column {outcome!r} not found")
        if columns is None:
            columns = [
                c for c in frame.columns
                if c != outcome and np.issubdtype(frame[c].dtype, np.number)
            ]
        missing = [c for c in columns if c not in frame.columns]
        if missing:
            raise KeyError(f"columns not found: {missing}")
        sub = frame[[outcome, *columns]]
        if sub.isna().any().any():
            bad = int(sub.isna().any(axis=1).sum())
            raise ValueError(f"{bad} rows contain missing values")
        return cls(sub[outcome].to_numpy(), sub[list(columns)].to_numpy(dtype=float), tuple(columns))


# ------------------------------------------------------------------ #
# Terms
# ------------------------------------------------------------------ #


@dataclass(frozen=True)
class Intercept:
    def labels(self) -> list[str]:
        return ["(Intercept)"]


@dataclass(frozen=True)
class Linear:
    col: str

    def labels(self) -> list[str]:
        return [self.col]


@dataclass(frozen=True)
class Power:
    col: str
    k: int = 2

    def __post_init__(self) -> None:
        if int(self.k) != self.k or self.k < 2:
            raise ValueError(f"power term needs an integer exponent >= 2, got {self.k}")

    def labels(self) -> list[str]:
        return [f"{self.col}^{self.k}"]


@dataclass(frozen=True)
class Interaction:
    a: str
    b: str

    def labels(self) -> list[str]:
        return [f"{self.a}:{self.b}"]


@dataclass(frozen=True)
class Spline:
    """Unpenalized B-spline basis with interior knots at equally spaced quantiles.

    The first basis function is dropped so the term can sit next to an
    intercept; the term therefore contributes ``num_knots + degree`` columns.
    ``knots`` and ``bounds`` are filled in by :meth:`TermSet.bind` so that the
    basis can be evaluated on new rows.
    """

    col: str
    num_knots: int = 4
    degree: int = 3
    knots: tuple[float, ...] | None = None
    bounds: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        if self.num_knots < 1:
            raise ValueError("spline term needs num_knots >= 1")
        if self.degree < 1:
            raise ValueError("spline degree must be >= 1")

    @property
    def df(self) -> int:
        return self.num_knots + self.degree

    def labels(self) -> list[str]:
        return [f"s({self.col})[{k}]" for k in range(1, self.df + 1)]

    def bind(self, values: NDArray) -> Spline:
        if self.knots is not None:
            return self
        probs = np.arange(1, self.num_knots + 1) / (self.num_knots + 1)
        knots = np.quantile(values, probs)
        lo, hi = float(values.min()), float(values.max())
        full = np.concatenate([[lo], knots, [hi]])
        if np.any(np.diff(full) <= 0):
            raise ValueError(
                f"spline knots for {self.col!r} are not strictly increasing; "
                "use fewer knots"
            )
        return replace(self, knots=tuple(float(k) for k in knots), bounds=(lo, hi))

    def basis(self, values: NDArray) -> NDArray:
        if self.knots is None or self.bounds is None:
            raise ValueError("spline term is not bound to data")
        lo, hi = self.bounds
        d = self.degree
        t = np.concatenate([[lo] * (d + 1), self.knots, [hi] * (d + 1)])
        # rows outside the training range are evaluated at the boundary
        x = np.clip(values, lo, hi)
        B = BSpline.design_matrix(x, t, d).toarray()
        return B[:, 1:]


Term = Intercept | Linear | Power | Interaction | Spline


@dataclass(frozen=True)
class TermSet:
    terms: tuple[Term, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "terms", tuple(self.terms))

    def __iter__(self):
        return iter(self.terms)

    def __len__(self) -> int:
        return len(self.terms)

    @property
    def has_intercept(self) -> bool:
        return any(isinstance(t, Intercept) for t in self.terms)

    def without_intercept(self) -> TermSet:
        return TermSet(tuple(t for t in self.terms if not isinstance(t, Intercept)))

    def with_intercept(self) -> TermSet:
        if self.has_intercept:
            return self
        return TermSet((Intercept(), *self.terms))

    def __add__(self, other: TermSet | Iterable[Term]) -> TermSet:
        return TermSet(self.terms + tuple(other))

    def labels(self) -> list[str]:
        return [lab for t in self.terms for lab in t.labels()]

    def columns(self) -> set[str]:
        out: set[str] = set()
        for t in self.terms:
            if isinstance(t, (Linear, Power, Spline)):
                out.add(t.col)
            elif isinstance(t, Interaction):
                out.update((t.a, t.b))
        return out

    def validate(self, names: Sequence[str]) -> None:
        unknown = sorted(self.columns() - set(names))
        if unknown:
            raise KeyError(f"unknown column(s) in terms: {unknown}")

    def bind(self, data: Dataset) -> TermSet:
        """Resolve data-dependent pieces (spline knots) against ``data``."""
        self.validate(data.names)
        return TermSet(
            tuple(t.bind(data.column(t.col)) if isinstance(t, Spline) else t for t in self.terms)
        )

    def describe(self) -> str:
        parts = []
        for t in self.terms:
            if isinstance(t, Intercept):
                parts.append("1")
            elif isinstance(t, Linear):
                parts.append(t.col)
            elif isinstance(t, Power):
                parts.append(f"{t.col}^{t.k}")
            elif isinstance(t, Interaction):
                parts.append(f"{t.a}:{t.b}")
            else:
                parts.append(f"bs({t.col},{t.num_knots},{t.degree})")
        return " + ".join(parts)


def parse_terms(formula: str) -> TermSet:
    """Parse a small formula language into a :class:`TermSet`.

    ``"1 + x + x^2 + x1:x2 + bs(hour,7,3)"``; ``bs(col, num_knots[, degree])``
    builds a spline term. Terms are separated by ``+``.
    """
    terms: list[Term] = []
    for raw in _split_top_level(formula):
        tok = raw.strip()
        if not tok:
            continue
        if tok == "1":
            terms.append(Intercept())
        elif tok.startswith("bs(") and tok.endswith(")"):
            args = [a.strip() for a in tok[3:-1].split(",")]
            col = args[0]
            num_knots = int(args[1]) if len(args) > 1 else 4
            degree = int(args[2]) if len(args) > 2 else 3
            terms.append(Spline(col, num_knots, degree))
        elif ":" in tok:
            a, b = (s.strip() for s in tok.split(":", 1))
            terms.append(Interaction(a, b))
        elif "^" in tok:
            col, k = tok.split("^", 1)
            terms.append(Power(col.strip(), int(k)))
        else:
            terms.append(Linear(tok))
    return TermSet(tuple(terms))


def _split_top_level(s: str) -> list[str]:
    out, depth, cur = [], 0, []
    for ch in s:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "+" and depth == 0:
            out.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    out.append("".join(cur))
    return out


def design_matrix(data: Dataset, terms: TermSet) -> NDArray[np.float64]:
    """Expand ``terms`` into an ``n x q`` matrix, columns in term order."""
    terms = terms.bind(data)
    blocks: list[NDArray] = []
    for t in terms:
        if isinstance(t, Intercept):
            blocks.append(np.ones((data.n, 1)))
        elif isinstance(t, Linear):
            blocks.append(data.column(t.col)[:, None])
        elif isinstance(t, Power):
            blocks.append(data.column(t.col)[:, None] ** t.k)
        elif isinstance(t, Interaction):
            blocks.append((data.column(t.a) * data.column(t.b))[:, None])
        elif isinstance(t, Spline):
            blocks.append(t.basis(data.column(t.col)))
        else:  # pragma: no cover
            raise TypeError(f"unknown term {t!r}")
    if not blocks:
        return np.zeros((data.n, 0))
    return np.hstack(blocks)


# ------------------------------------------------------------------ #
# Standard normal
# ------------------------------------------------------------------ #


def std_normal_cdf(z: ArrayLike) -> NDArray | float:
    return special.ndtr(z)


def std_normal_pdf(z: ArrayLike) -> NDArray | float:
    z = np.asarray(z, dtype=float)
    return np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)


def std_normal_quantile(p: ArrayLike) -> NDArray | float:
    """Inverse of :func:`std_normal_cdf` on the open interval (0, 1).

    Raises ``ValueError`` at 0 or 1; callers that need finite values clip first.
    """
    arr = np.asarray(p, dtype=float)
    if np.any((arr <= 0.0) | (arr >= 1.0)) or np.any(np.isnan(arr)):
        raise ValueError("std_normal_quantile is defined on the open interval (0, 1)")
    return special.ndtri(p)


# ------------------------------------------------------------------ #
# Random streams
# ------------------------------------------------------------------ #


class RngStream:
    """Reproducible random stream keyed by ``(seed, stream_id)``.

    Backed by the counter-based Philox generator; distinct stream ids get
    independent keys through :class:`numpy.random.SeedSequence` spawn keys.
    A stream is single-owner: to parallelize, allocate new stream ids.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        self._gen = np.random.Generator(np.random.Philox(ss))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def substream(self, k: int) -> RngStream:
        """Independent child stream, deterministic in ``(seed, stream_id, k)``."""
        return RngStream(self.seed, (self.stream_id << 20) + 1 + int(k))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        return self._gen.uniform(low, high, size)

    def normal(self, mean=0.0, sd=1.0, size=None):
        if np.any(np.asarray(sd) < 0):
            raise ValueError("normal sd must be non-negative")
        return self._gen.normal(mean, sd, size)

    def gamma(self, shape, rate=1.0, size=None):
        if np.any(np.asarray(shape) <= 0) or np.any(np.asarray(rate) <= 0):
            raise ValueError("gamma shape and rate must be positive")
        return self._gen.gamma(shape, 1.0 / np.asarray(rate, dtype=float), size)

    def poisson(self, mean, size=None):
        if np.any(np.asarray(mean) < 0):
            raise ValueError("poisson mean must be non-negative")
        return self._gen.poisson(mean, size)

    def bernoulli(self, p, size=None):
        p = np.asarray(p, dtype=float)
        if np.any((p < 0) | (p > 1)):
            raise ValueError("bernoulli probability must lie in [0, 1]")
        if size is None:
            size = p.shape if p.ndim else None
        return (self._gen.random(size) < p).astype(np.int64)

    def categorical(self, probs):
        """Draw category indices by inversion.

        ``probs`` is a probability vector (one draw) or an ``n x K`` matrix
        (one draw per row).
        """
        P = np.asarray(probs, dtype=float)
        single = P.ndim == 1
        P = np.atleast_2d(P)
        if np.any(P < 0) or not np.allclose(P.sum(axis=1), 1.0, atol=1e-8):
            raise ValueError("categorical probabilities must be non-negative and sum to 1")
        u = self._gen.random(P.shape[0])
        cum = np.cumsum(P, axis=1)
        idx = (u[:, None] >= cum[:, :-1]).sum(axis=1) if P.shape[1] > 1 else np.zeros(len(u), int)
        idx = np.minimum(idx, P.shape[1] - 1)
        return int(idx[0]) if single else idx.astype(np.int64)
