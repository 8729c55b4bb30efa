"""l1-penalised first-stage programs.

Three losses share one engine:

* calibrated logistic, treated arm: ``E_n[w (D e^{-g'Z} + (1-D) g'Z)]``
* calibrated logistic, control arm: ``E_n[w ((1-D) e^{g'Z} - D g'Z)]``
* weighted squares: ``E_n[w v (Y - a'Z)^2] / 2``

plus the ordinary logistic likelihood used by the benchmark estimator.  The
smooth losses are minimised by a proximal Newton method (coordinate descent
on the local quadratic model, backtracking line search on the true penalised
objective); weighted squares is solved by coordinate descent directly.  Every
returned solution is certified by its KKT residual.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _backend
from .exceptions import DegenerateProblemError, DivergenceError

EXP_CLAMP = 700.0

LOSS_KINDS = (
    "calibrated_logistic_treated",
    "calibrated_logistic_control",
    "weighted_squares",
    "logistic_mle",
)


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-7
    rel_obj_tol: float = 1e-10
    max_iter: int = 100_000
    divergence_cap: float = 1e3
    penalize_intercept: bool = True

    def penalty_factors(self, d_z: int) -> np.ndarray:
        pf = np.ones(d_z)
        if not self.penalize_intercept:
            pf[0] = 0.0
        return pf


DEFAULT_SOLVER = SolverConfig()


@dataclass
class PenalizedProblem:
    """One penalised program; ``weights`` is the basis column p_j(X_i)."""

    loss_kind: str
    weights: np.ndarray
    covariates: np.ndarray
    treatment: Optional[np.ndarray] = None
    outcome: Optional[np.ndarray] = None
    exp_weights: Optional[np.ndarray] = None
    lam: float = 0.0
    penalty_factors: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        self.covariates = np.asarray(self.covariates, dtype=float)
        n, d = self.covariates.shape
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (n,):
            raise ValueError("weights must have one entry per row of Z")
        if np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.penalty_factors is None:
            self.penalty_factors = np.ones(d)
        else:
            self.penalty_factors = np.asarray(self.penalty_factors, dtype=float)
        if self.loss_kind == "weighted_squares":
            if self.outcome is None:
                raise ValueError("weighted_squares needs an outcome")
            self.outcome = np.asarray(self.outcome, dtype=float)
            v = np.ones(n) if self.exp_weights is None else np.asarray(self.exp_weights, dtype=float)
            if np.any(v < 0):
                raise ValueError("exp_weights must be nonnegative")
            self.exp_weights = v
        else:
            if self.treatment is None:
                raise ValueError(f"{self.loss_kind} needs a treatment vector")
            self.treatment = np.asarray(self.treatment, dtype=float)

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def lam_vec(self) -> np.ndarray:
        return self.lam * self.penalty_factors

    # The control-arm loss is the treated loss with D -> 1-D and coef -> -coef,
    # so everything internal works on the "treated form".
    def _treated_form(self):
        if self.loss_kind == "calibrated_logistic_control":
            return 1.0 - self.treatment, -1.0
        return self.treatment, 1.0

    def smooth(self, coef):
        """Smooth part of the objective: (value, gradient, per-row curvature, clamped)."""
        Z = self.covariates
        w = self.weights
        n = self.n
        if self.loss_kind == "weighted_squares":
            hw = w * self.exp_weights
            r = self.outcome - Z @ coef
            val = 0.5 * float(np.dot(hw, r * r)) / n
            grad = -(Z.T @ (hw * r)) / n
            return val, grad, hw, False
        if self.loss_kind == "logistic_mle":
            D = self.treatment
            eta = Z @ coef
            # log(1 + e^eta) computed stably
            val = float(np.dot(w, np.logaddexp(0.0, eta) - D * eta)) / n
            p = _expit(eta)
            grad = Z.T @ (w * (p - D)) / n
            return val, grad, w * p * (1.0 - p), False
        D, sign = self._treated_form()
        eta = sign * (Z @ coef)
        clamped = bool(np.any(np.abs(eta) > EXP_CLAMP))
        e = np.exp(-np.clip(eta, -EXP_CLAMP, EXP_CLAMP))
        val = float(np.dot(w, D * e + (1.0 - D) * eta)) / n
        grad = sign * (Z.T @ (w * ((1.0 - D) - D * e))) / n
        return val, grad, w * D * e, clamped

    def objective(self, coef) -> float:
        return self.smooth(coef)[0] + float(np.dot(self.lam_vec, np.abs(coef)))

    def gradient(self, coef) -> np.ndarray:
        return self.smooth(coef)[1]


def _expit(eta):
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    ez = np.exp(eta[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class SolverResult:
    coef: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    converged: bool
    diverged: bool = False
    clamped: bool = False
    lam: float = 0.0
    history: list = field(default_factory=list, repr=False)


def kkt_from_gradient(grad, coef, lam_vec) -> float:
    """Distance of ``-grad`` from the l1 subdifferential at ``coef``.

    Zero coordinates contribute ``max(|g_l| - lam_l, 0)``; nonzero ones
    ``|g_l + lam_l sign(coef_l)|``.
    """
    grad = np.asarray(grad, dtype=float)
    coef = np.asarray(coef, dtype=float)
    nz = coef != 0
    res = np.where(
        nz,
        np.abs(grad + lam_vec * np.sign(coef)),
        np.maximum(np.abs(grad) - lam_vec, 0.0),
    )
    return float(res.max()) if res.size else 0.0


def kkt_residual(problem: PenalizedProblem, coef) -> float:
    return kkt_from_gradient(problem.gradient(coef), coef, problem.lam_vec)


def _fortran(Z):
    return np.asfortranarray(Z, dtype=float)


def _solve_quadratic(problem, cfg, x0, kernel):
    Z = problem.covariates
    lam_vec = problem.lam_vec
    hw = problem.weights * problem.exp_weights
    if not np.any(hw > 0):
        raise DegenerateProblemError("all effective weights w*v are zero")
    Zf = _fortran(Z)
    coef = np.array(x0, dtype=float, copy=True)
    total = 0
    history = []
    inner_tol = cfg.tol * 1e-2
    kkt = np.inf
    restarts = 0
    while total < cfg.max_iter and restarts < 200:
        restarts += 1
        val, grad, h, _ = problem.smooth(coef)
        history.append(val + float(np.dot(lam_vec, np.abs(coef))))
        kkt = kkt_from_gradient(grad, coef, lam_vec)
        if kkt <= cfg.tol:
            break
        base = coef.copy()
        sweeps, status = kernel(Zf, h, grad, base, coef, lam_vec, 0.0, inner_tol,
                                min(1000, cfg.max_iter - total))
        total += sweeps
        if status == 2:
            raise DegenerateProblemError("coordinate with zero weighted curvature but nonzero gradient")
        if status == 0 and sweeps == 1 and np.array_equal(coef, base):
            # no coordinate moved but KKT still above tolerance: tighten
            inner_tol *= 1e-2
            if inner_tol < 1e-18:
                break
    obj = problem.objective(coef)
    kkt = kkt_residual(problem, coef)
    return SolverResult(
        coef=coef,
        objective=obj,
        kkt_residual=kkt,
        iterations=total,
        converged=kkt <= cfg.tol,
        lam=problem.lam,
        history=history,
    )


def _solve_smooth(problem, cfg, x0, kernel):
    Z = problem.covariates
    lam_vec = problem.lam_vec
    Zf = _fortran(Z)
    coef = np.array(x0, dtype=float, copy=True)
    val, grad, h, clamped = problem.smooth(coef)
    F = val + float(np.dot(lam_vec, np.abs(coef)))
    history = [F]
    converged = diverged = False
    it = 0
    kkt = kkt_from_gradient(grad, coef, lam_vec)
    inner_tol = max(cfg.tol * 1e-2, 1e-12)
    while it < cfg.max_iter:
        if kkt <= cfg.tol:
            converged = True
            break
        it += 1
        # light damping keeps directions with no curvature (no treated rows)
        # bounded; the line search guards the true objective
        mu = 1e-10 * (1.0 + float(np.max(h @ (Z * Z)) / problem.n)) if h.any() else 1e-6
        trial = coef.copy()
        _, status = kernel(Zf, h, grad, coef, trial, lam_vec, mu, inner_tol, 2000)
        step = trial - coef
        if not np.any(step):
            inner_tol *= 1e-2
            if inner_tol < 1e-18:
                break
            continue
        pen_new = float(np.dot(lam_vec, np.abs(trial)))
        pen_old = float(np.dot(lam_vec, np.abs(coef)))
        decrease = float(np.dot(grad, step)) + pen_new - pen_old
        t = 1.0
        accepted = False
        while t > 1e-12:
            cand = coef + t * step
            v2, g2, h2, c2 = problem.smooth(cand)
            F2 = v2 + float(np.dot(lam_vec, np.abs(cand)))
            if F2 <= F + 1e-4 * t * min(decrease, 0.0):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        rel = abs(F - F2) / max(1.0, abs(F))
        coef, val, grad, h, F = cand, v2, g2, h2, F2
        clamped = clamped or c2
        history.append(F)
        kkt = kkt_from_gradient(grad, coef, lam_vec)
        if np.sum(np.abs(coef)) > cfg.divergence_cap:
            diverged = True
            break
        if rel <= cfg.rel_obj_tol and kkt > cfg.tol:
            # objective has stalled: re-solve the model more tightly, then give up
            if inner_tol <= 1e-16:
                break
            inner_tol = max(inner_tol * 1e-2, 1e-18)
    if kkt <= cfg.tol and not diverged:
        converged = True
    return SolverResult(
        coef=coef,
        objective=F,
        kkt_residual=kkt,
        iterations=it,
        converged=converged,
        diverged=diverged,
        clamped=clamped,
        lam=problem.lam,
        history=history,
    )


def solve(problem: PenalizedProblem, cfg: SolverConfig = DEFAULT_SOLVER, x0=None,
          kernel=None, raise_on_divergence: bool = True) -> SolverResult:
    """Minimise the penalised objective of ``problem`` from warm start ``x0``."""
    kernel = kernel or _backend.cd_quadratic
    d = problem.covariates.shape[1]
    x0 = np.zeros(d) if x0 is None else np.asarray(x0, dtype=float)
    if problem.loss_kind == "weighted_squares":
        res = _solve_quadratic(problem, cfg, x0, kernel)
    else:
        res = _solve_smooth(problem, cfg, x0, kernel)
    if res.diverged and raise_on_divergence:
        raise DivergenceError(
            f"{problem.loss_kind}: |coef|_1 exceeded {cfg.divergence_cap:g} at lambda={problem.lam:.4g}; "
            "the objective is likely unbounded below for this penalty",
            res,
        )
    return res


def _pf(cfg, Z, penalty_factors):
    if penalty_factors is not None:
        return penalty_factors
    return cfg.penalty_factors(np.shape(Z)[1])


def fit_calibrated_logistic_treated(w, D, Z, lam, cfg: SolverConfig = DEFAULT_SOLVER, x0=None,
                                    penalty_factors=None, **kw) -> SolverResult:
    prob = PenalizedProblem("calibrated_logistic_treated", w, Z, treatment=D, lam=lam,
                            penalty_factors=_pf(cfg, Z, penalty_factors))
    return solve(prob, cfg, x0, **kw)


def fit_calibrated_logistic_control(w, D, Z, lam, cfg: SolverConfig = DEFAULT_SOLVER, x0=None,
                                    penalty_factors=None, **kw) -> SolverResult:
    prob = PenalizedProblem("calibrated_logistic_control", w, Z, treatment=D, lam=lam,
                            penalty_factors=_pf(cfg, Z, penalty_factors))
    return solve(prob, cfg, x0, **kw)


def fit_weighted_lasso(w, v, Z, Y, lam, cfg: SolverConfig = DEFAULT_SOLVER, x0=None,
                       penalty_factors=None, **kw) -> SolverResult:
    prob = PenalizedProblem("weighted_squares", w, Z, outcome=Y, exp_weights=v, lam=lam,
                            penalty_factors=_pf(cfg, Z, penalty_factors))
    return solve(prob, cfg, x0, **kw)


def fit_logistic_mle(D, Z, lam, cfg: SolverConfig = DEFAULT_SOLVER, x0=None, weights=None,
                     penalty_factors=None, **kw) -> SolverResult:
    w = np.ones(len(D)) if weights is None else weights
    prob = PenalizedProblem("logistic_mle", w, Z, treatment=D, lam=lam,
                            penalty_factors=_pf(cfg, Z, penalty_factors))
    return solve(prob, cfg, x0, **kw)


def zero_threshold(problem: PenalizedProblem) -> float:
    """Smallest lambda at which coef = 0 is optimal (all factors equal one)."""
    return float(np.max(np.abs(problem.gradient(np.zeros(problem.covariates.shape[1])))))


def bregman_gamma(w, D, Z, coef_a, coef_b) -> float:
    """Symmetrised Bregman divergence of the treated calibrated loss."""
    ia = Z @ coef_a
    ib = Z @ coef_b
    ea = np.exp(-np.clip(ia, -EXP_CLAMP, EXP_CLAMP))
    eb = np.exp(-np.clip(ib, -EXP_CLAMP, EXP_CLAMP))
    return float(np.mean(w * D * (ea - eb) * (ib - ia)))


def bregman_alpha(w, v, Z, coef_a, coef_b) -> float:
    """Symmetrised Bregman divergence of the weighted squared loss."""
    diff = Z @ (np.asarray(coef_b) - np.asarray(coef_a))
    return float(np.mean(w * v * diff * diff))
