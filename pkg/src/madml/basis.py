"""Weakly positive series bases: local constants and clamped B-splines."""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import NamedTuple, Optional

import numpy as np

from .exceptions import BasisError, OutOfSupportError, SingularDesignError

KINDS = ("local_constant", "bspline")


def _check_knots(knots):
    knots = np.asarray(knots, dtype=float)
    if knots.ndim != 1 or knots.size < 2:
        raise BasisError("need at least two knots (the support boundaries)")
    if np.any(np.diff(knots) < 0):
        raise BasisError("knots must be nondecreasing")
    if knots[0] == knots[-1]:
        raise BasisError("knots must span a nondegenerate interval")
    return knots


def _check_support(x, knots):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    bad = (x < knots[0]) | (x > knots[-1]) | ~np.isfinite(x)
    if np.any(bad):
        raise OutOfSupportError(
            f"x={x[bad][0]!r} outside basis support [{knots[0]}, {knots[-1]}]"
        )
    return x


def _indicators(x, t):
    """Order-one splines on knot vector ``t``: 1[t_j <= x < t_{j+1}], with
    the last nonempty interval closed on the right."""
    B = ((x[:, None] >= t[None, :-1]) & (x[:, None] < t[None, 1:])).astype(float)
    nonempty = np.flatnonzero(t[1:] > t[:-1])
    last = nonempty[-1]
    B[x == t[-1], last] = 1.0
    return B


def local_constant_basis(x, knots):
    """Indicators of the cells ``[l_{j-1}, l_j)``; the last cell is closed.

    Accepts a scalar (returns a length-``t`` vector) or an array of points
    (returns an ``n x t`` matrix).
    """
    knots = _check_knots(knots)
    scalar = np.ndim(x) == 0
    xs = _check_support(x, knots)
    B = _indicators(xs, knots)
    return B[0] if scalar else B


def clamped_knot_vector(knots, degree):
    knots = _check_knots(knots)
    return np.concatenate([[knots[0]] * degree, knots, [knots[-1]] * degree])


def bspline_basis(x, knots, degree):
    """Clamped B-splines of the given degree via the recursion

    ``B_{j,r+1} = w_{j,r} B_{j,r} + (1 - w_{j+1,r}) B_{j+1,r}``,
    ``w_{j,r}(x) = (x - t_j) / (t_{j+r} - t_j)`` (zero when the span vanishes),

    started from the cell indicators.  ``knots`` are the breakpoints including
    both boundaries; the boundaries are replicated ``degree + 1`` times, so the
    basis has ``len(knots) - 1 + degree`` functions summing to one on the
    closed support.
    """
    if int(degree) != degree or degree < 0:
        raise BasisError(f"degree must be a nonnegative integer, got {degree!r}")
    degree = int(degree)
    t = clamped_knot_vector(knots, degree)
    scalar = np.ndim(x) == 0
    xs = _check_support(x, t)
    B = _indicators(xs, t)
    for r in range(1, degree + 1):
        m = B.shape[1] - 1
        span = t[r : r + m + 1] - t[: m + 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(span > 0, (xs[:, None] - t[None, : m + 1]) / span, 0.0)
        B = w[:, :m] * B[:, :m] + (1.0 - w[:, 1 : m + 1]) * B[:, 1 : m + 1]
    return B[0] if scalar else B


@dataclass(frozen=True)
class BasisSpec:
    """Which basis to build.

    ``knots`` are breakpoints including the support boundaries.  When omitted,
    ``n_knots`` equally spaced breakpoints are laid over ``boundary`` (or the
    observed range of x).  The default, degree-2 B-splines on the two
    boundary knots, has three columns.
    """

    kind: str = "bspline"
    degree: int = 2
    knots: Optional[tuple] = None
    n_knots: int = 2
    boundary: Optional[tuple] = None
    normalize: bool = True
    affine_shift: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise BasisError(f"basis kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "local_constant" and self.degree != 0:
            object.__setattr__(self, "degree", 0)
        if self.degree < 0:
            raise BasisError("degree must be nonnegative")
        if self.knots is not None:
            object.__setattr__(self, "knots", tuple(float(v) for v in _check_knots(self.knots)))
        elif self.n_knots < 2:
            raise BasisError("n_knots must be at least 2")
        if self.boundary is not None:
            lo, hi = self.boundary
            if not lo < hi:
                raise BasisError("boundary must satisfy lo < hi")
            object.__setattr__(self, "boundary", (float(lo), float(hi)))
        if self.affine_shift < 0:
            raise BasisError("affine_shift must be nonnegative")

    @property
    def k(self) -> int:
        if self.knots is None:
            return self.n_knots - 1 + self.degree
        return len(self.knots) - 1 + self.degree

    def resolve(self, x) -> "BasisSpec":
        """Fix the knot sequence from the data range if it was left implicit."""
        if self.knots is not None:
            return self
        if self.boundary is not None:
            lo, hi = self.boundary
        else:
            x = np.asarray(x, dtype=float)
            lo, hi = float(x.min()), float(x.max())
            if lo == hi:
                raise BasisError("conditioning variable is constant; cannot place knots")
        return replace(self, knots=tuple(np.linspace(lo, hi, self.n_knots).tolist()))

    def raw(self, x) -> np.ndarray:
        if self.knots is None:
            raise BasisError("unresolved basis spec; call resolve() first")
        if self.kind == "local_constant":
            return np.atleast_2d(local_constant_basis(np.atleast_1d(x), self.knots))
        return np.atleast_2d(bspline_basis(np.atleast_1d(x), self.knots, self.degree))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["knots"] = None if self.knots is None else list(self.knots)
        out["boundary"] = None if self.boundary is None else list(self.boundary)
        return out


@dataclass(frozen=True, eq=False)
class BasisMatrix:
    """Basis evaluated at a set of points.

    ``values`` holds p_j(X_i) after normalisation (if any); ``scales`` are the
    divisors applied to the raw columns, ``column_norms`` the empirical l2
    norms ``sqrt(mean p_j^2)`` before normalisation.
    """

    values: np.ndarray
    column_norms: np.ndarray
    scales: np.ndarray
    xi_inf: float
    xi_2: float
    spec: BasisSpec

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[1]

    @property
    def shift(self) -> float:
        return float(self.spec.affine_shift)

    @property
    def first_stage_weights(self) -> np.ndarray:
        """Weights for the first-stage programs: p_j + c (c = affine shift)."""
        if self.shift == 0.0:
            return self.values
        return self.values + self.shift

    def to_csv(self, path, x=None) -> None:
        cols = [f"p{j + 1}" for j in range(self.k)]
        data = self.values if x is None else np.column_stack([x, self.values])
        header = ",".join(cols if x is None else ["x"] + cols)
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.10g")


def evaluate_basis(spec: BasisSpec, x_values, scales=None) -> BasisMatrix:
    """Evaluate ``spec`` at ``x_values``.

    With ``normalize`` each column is divided by its empirical l2 norm so that
    ``mean(p_j^2) = 1``.  Passing ``scales`` reuses divisors computed on
    another sample (e.g. to evaluate a fitted basis on a plotting grid).
    """
    x_values = np.asarray(x_values, dtype=float)
    spec = spec.resolve(x_values)
    raw = spec.raw(x_values)
    norms = np.sqrt(np.mean(raw * raw, axis=0))
    if scales is None:
        if spec.normalize:
            if np.any(norms == 0):
                empty = int(np.flatnonzero(norms == 0)[0])
                raise SingularDesignError(
                    f"basis column {empty + 1} is zero on the sample; use fewer knots"
                )
            scales = norms.copy()
        else:
            scales = np.ones(raw.shape[1])
    scales = np.asarray(scales, dtype=float)
    values = raw / scales
    values.setflags(write=False)
    xi_inf = float(np.max(np.abs(values))) if values.size else 0.0
    xi_2 = float(np.max(np.linalg.norm(values, axis=1))) if values.size else 0.0
    return BasisMatrix(values=values, column_norms=norms, scales=scales, xi_inf=xi_inf, xi_2=xi_2, spec=spec)


class DesignMatrix(NamedTuple):
    q: np.ndarray
    min_eigenvalue: float


def design_matrix(B, floor: Optional[float] = 1e-8) -> DesignMatrix:
    """Empirical design ``Q = P'P / n`` and its smallest eigenvalue.

    Raises :class:`SingularDesignError` when the smallest eigenvalue falls
    below ``floor`` (pass ``floor=None`` to skip the check).
    """
    P = B.values if isinstance(B, BasisMatrix) else np.asarray(B, dtype=float)
    n = P.shape[0]
    q = P.T @ P / n
    q = 0.5 * (q + q.T)
    min_eig = float(np.linalg.eigvalsh(q)[0])
    if floor is not None and min_eig < floor:
        raise SingularDesignError(
            f"design matrix min eigenvalue {min_eig:.3g} below {floor:g}; reduce the number of knots"
        )
    return DesignMatrix(q, min_eig)
