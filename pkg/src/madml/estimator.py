"""Doubly robust series estimation of conditional counterfactual means and
conditional average treatment effects.

For each basis term ``p_j`` a propensity/outcome pair is fitted with ``p_j``
as observation weights; the pair's aIPW signal is projected on the basis and
inference uses a heteroskedasticity-robust sandwich plus a Gaussian
multiplier bootstrap for uniform bands.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, ndtri

from . import firststage as fs
from ._rng import UNIFORM_BANDS, substream
from .basis import BasisMatrix, BasisSpec, design_matrix, evaluate_basis
from .exceptions import ConfigError, DivergenceError, InferenceError
from .penalty import PenaltyConfig, order_statistic_rank, select_penalties
from .solver import DEFAULT_SOLVER, SolverConfig

MODE_CODES = {"treated": 1, "control": 0, "cate": 2}


def aipw_treated(y, d, pi, m):
    """``d y / pi - (d / pi - 1) m``."""
    y, d, pi, m = (np.asarray(a, dtype=float) for a in (y, d, pi, m))
    return d * y / pi - (d / pi - 1.0) * m


def aipw_control(y, d, pi, m):
    """``(1-d) y / (1-pi) - ((1-d) / (1-pi) - 1) m``.

    The minus sign on the augmentation term is what makes the signal
    unbiased for the control mean when either nuisance is correct.
    """
    y, d, pi, m = (np.asarray(a, dtype=float) for a in (y, d, pi, m))
    r = (1.0 - d) / (1.0 - pi)
    return r * y - (r - 1.0) * m


AIPW = {"treated": aipw_treated, "control": aipw_control}


@dataclass(frozen=True)
class EstimatorConfig:
    """Everything that determines a fit apart from the data and the seed.

    ``style="standard"`` gives the benchmark: a single l1 logistic and a
    single l1 least-squares fit (unit weights) shared by every basis term.
    """

    basis: BasisSpec = BasisSpec()
    penalty: PenaltyConfig = PenaltyConfig()
    solver: SolverConfig = DEFAULT_SOLVER
    style: str = "model_assisted"
    eta: float = 0.05
    n_boot_uniform: int = 10_000
    grid_size: int = 100
    grid: Optional[tuple] = None
    propensity_clip: Optional[tuple] = (0.01, 0.99)
    outcome_clip_frac: Optional[float] = 0.125

    def __post_init__(self):
        if self.style not in fs.STYLES:
            raise ConfigError(f"style must be one of {fs.STYLES}")
        if not 0 < self.eta <= 1:
            raise ConfigError("eta must lie in (0, 1]")
        if self.n_boot_uniform < 1:
            raise ConfigError("n_boot_uniform must be positive")
        if self.grid is None and self.grid_size < 1:
            raise ConfigError("grid_size must be positive")
        if self.grid is not None:
            object.__setattr__(self, "grid", tuple(float(g) for g in self.grid))
            if not self.grid:
                raise ConfigError("grid must be nonempty")
        if self.propensity_clip is not None:
            lo, hi = self.propensity_clip
            if not 0 < lo < hi < 1:
                raise ConfigError("propensity_clip must satisfy 0 < lo < hi < 1")
            object.__setattr__(self, "propensity_clip", (float(lo), float(hi)))
        if self.outcome_clip_frac is not None and self.outcome_clip_frac < 0:
            raise ConfigError("outcome_clip_frac must be nonnegative")


# ---------------------------------------------------------------- first stage


@dataclass
class ArmNuisance:
    """Fitted nuisance pairs for one arm.

    Column ``j`` of ``signals`` is the aIPW signal built from pair ``j``.
    With an affine shift ``c > 0`` an extra anchor pair (constant weight
    ``1 + c``) supplies ``anchor_signal``.
    """

    arm: str
    style: str
    gammas: np.ndarray
    alphas: np.ndarray
    signals: np.ndarray
    penalties: list
    kkt_gamma: np.ndarray
    kkt_alpha: np.ndarray
    iterations: np.ndarray
    propensity_clips: np.ndarray
    outcome_clips: np.ndarray
    foc_norm: np.ndarray
    anchor_signal: Optional[np.ndarray] = None

    @property
    def n_pairs(self) -> int:
        return self.gammas.shape[0]

    def diagnostics(self) -> dict:
        return {
            "arm": self.arm,
            "style": self.style,
            "penalties": [p.to_dict() for p in self.penalties],
            "kkt_gamma": self.kkt_gamma.tolist(),
            "kkt_alpha": self.kkt_alpha.tolist(),
            "iterations": self.iterations.tolist(),
            "propensity_clips": self.propensity_clips.tolist(),
            "outcome_clips": self.outcome_clips.tolist(),
            "foc_norm": self.foc_norm.tolist(),
        }


def propensity(style, arm, Z, gamma):
    """Unclipped ``pi(Z) = logistic(gamma'Z)`` (probability of treatment)."""
    return expit(Z @ gamma)


def foc_norm(arm, w, D, Z, pi):
    """``|E_n[w (1 - D / pi) Z]|_inf`` (control: ``1 - (1-D)/(1-pi)``)."""
    r = 1.0 - D / pi if arm == "treated" else 1.0 - (1.0 - D) / (1.0 - pi)
    return float(np.max(np.abs((w * r) @ Z))) / Z.shape[0]


def _outcome_bounds(y, frac):
    lo, hi = float(y.min()), float(y.max())
    pad = frac * (hi - lo)
    return lo - pad, hi + pad


def _fit_pair(ds, w, arm, style, choice, cfg: EstimatorConfig, y_bounds):
    D, Z, Y = ds.d, ds.z, ds.y
    g = fs.fit_gamma(style, arm, w, D, Z, choice.lam_gamma, cfg.solver, x0=choice.pilot_gamma)
    v = fs.outcome_weights(style, arm, D, Z, g.coef)
    a = fs.fit_alpha(w, v, Z, Y, choice.lam_alpha, cfg.solver, x0=choice.pilot_alpha)
    pi = propensity(style, arm, Z, g.coef)
    foc = foc_norm(arm, w, D, Z, pi)
    n_pclip = 0
    if cfg.propensity_clip is not None:
        lo, hi = cfg.propensity_clip
        n_pclip = int(np.count_nonzero((pi < lo) | (pi > hi)))
        pi = np.clip(pi, lo, hi)
    m = Z @ a.coef
    n_oclip = 0
    if y_bounds is not None:
        n_oclip = int(np.count_nonzero((m < y_bounds[0]) | (m > y_bounds[1])))
        m = np.clip(m, *y_bounds)
    signal = AIPW[arm](Y, D, pi, m)
    return g, a, signal, n_pclip, n_oclip, foc


def fit_first_stage(ds, basis: BasisMatrix, cfg: EstimatorConfig, arm: str = "treated",
                    seed: int = 0, threads: int = 1) -> ArmNuisance:
    """Select penalties and fit every nuisance pair for ``arm``."""
    if arm not in fs.ARMS:
        raise ConfigError(f"arm must be one of {fs.ARMS}")
    style = cfg.style
    n = ds.n
    if style == "standard":
        W = np.ones((n, 1))
    else:
        W = np.asarray(basis.first_stage_weights)
        if basis.shift > 0:
            W = np.column_stack([W, np.full(n, 1.0 + basis.shift)])
    choices = select_penalties(ds, W, cfg.penalty, seed=seed, style=style, arm=arm,
                               solver_cfg=cfg.solver, threads=threads)
    in_arm = ds.d == (1.0 if arm == "treated" else 0.0)
    y_bounds = None
    if cfg.outcome_clip_frac is not None:
        y_bounds = _outcome_bounds(ds.y[in_arm], cfg.outcome_clip_frac)

    def task(j):
        try:
            return _fit_pair(ds, W[:, j], arm, style, choices[j], cfg, y_bounds)
        except DivergenceError as exc:
            raise DivergenceError(f"{arm} arm, pair {j + 1}: {exc}", exc.result) from exc

    if threads > 1 and W.shape[1] > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            fits = list(pool.map(task, range(W.shape[1])))
    else:
        fits = [task(j) for j in range(W.shape[1])]

    anchor = None
    if style == "standard":
        fits = fits * basis.k
        choices = choices * basis.k
    elif basis.shift > 0:
        anchor = fits[-1][2]
    k_fit = len(fits)
    return ArmNuisance(
        arm=arm,
        style=style,
        gammas=np.array([f[0].coef for f in fits]),
        alphas=np.array([f[1].coef for f in fits]),
        signals=np.column_stack([f[2] for f in fits[: basis.k]]),
        penalties=list(choices),
        kkt_gamma=np.array([f[0].kkt_residual for f in fits]),
        kkt_alpha=np.array([f[1].kkt_residual for f in fits]),
        iterations=np.array([[f[0].iterations, f[1].iterations] for f in fits]).reshape(k_fit, 2),
        propensity_clips=np.array([f[3] for f in fits]),
        outcome_clips=np.array([f[4] for f in fits]),
        foc_norm=np.array([f[5] for f in fits]),
        anchor_signal=anchor,
    )


# --------------------------------------------------------------- second stage


@dataclass
class SecondStage:
    beta: np.ndarray
    scores: np.ndarray
    q_inv: np.ndarray

    def omega(self) -> np.ndarray:
        return sandwich(self.q_inv, self.scores)


def sandwich(q_inv, scores) -> np.ndarray:
    """``Q^-1 (scores' scores / n) Q^-1``, symmetrised."""
    meat = scores.T @ scores / scores.shape[0]
    om = q_inv @ meat @ q_inv
    return 0.5 * (om + om.T)


def _q_inverse(P):
    q = design_matrix(P).q
    q_inv = np.linalg.inv(q)
    return 0.5 * (q_inv + q_inv.T)


def second_stage_beta(B, S, anchor=None, shift: float = 0.0) -> np.ndarray:
    """``beta = Q^-1 v`` with ``v_j = E_n[p_j S_j]``.

    With an affine shift ``c`` the first-stage weights were ``p_j + c`` and
    ``v_j = E_n[(p_j + c) S_j - c S_anchor]``.
    """
    return second_stage(B, S, anchor, shift).beta


def second_stage(B, S, anchor=None, shift: float = 0.0) -> SecondStage:
    P = B.values if isinstance(B, BasisMatrix) else np.asarray(B, dtype=float)
    S = np.asarray(S, dtype=float)
    if S.ndim == 1:
        S = S[:, None]
    if S.shape[1] == 1 and P.shape[1] > 1:
        S = np.repeat(S, P.shape[1], axis=1)
    q_inv = _q_inverse(P)
    WS = P * S
    if shift:
        WS = WS + shift * (S - np.asarray(anchor, dtype=float)[:, None])
    beta = q_inv @ WS.mean(axis=0)
    ghat = P @ beta
    scores = WS - P * ghat[:, None]
    return SecondStage(beta, scores, q_inv)


def omega_hat(B, S, beta=None) -> np.ndarray:
    """Sandwich variance of ``beta`` from residuals ``S_ij - p(X_i)'beta``."""
    P = B.values if isinstance(B, BasisMatrix) else np.asarray(B, dtype=float)
    S = np.asarray(S, dtype=float)
    if S.ndim == 1:
        S = S[:, None]
    q_inv = _q_inverse(P)
    if beta is None:
        beta = q_inv @ (P * S).mean(axis=0)
    resid = S - (P @ beta)[:, None]
    return sandwich(q_inv, P * resid)


def combined_omega(B, S_treated, S_control, beta_treated=None, beta_control=None) -> np.ndarray:
    """Variance of ``beta_treated - beta_control`` from the residual difference."""
    P = B.values if isinstance(B, BasisMatrix) else np.asarray(B, dtype=float)
    q_inv = _q_inverse(P)
    e1 = _residuals(P, q_inv, S_treated, beta_treated)
    e0 = _residuals(P, q_inv, S_control, beta_control)
    return sandwich(q_inv, P * (e1 - e0))


def combined_omega_three_term(B, S_treated, S_control, beta_treated=None, beta_control=None):
    """``Omega_1 + Omega_0 - Omega_2 - Omega_2'`` with the cross term
    ``Omega_2 = Q^-1 E_n[(p e_1)(p e_0)'] Q^-1``; equals :func:`combined_omega`."""
    P = B.values if isinstance(B, BasisMatrix) else np.asarray(B, dtype=float)
    q_inv = _q_inverse(P)
    a = P * _residuals(P, q_inv, S_treated, beta_treated)
    b = P * _residuals(P, q_inv, S_control, beta_control)
    n = P.shape[0]
    om2 = q_inv @ (a.T @ b / n) @ q_inv
    return sandwich(q_inv, a) + sandwich(q_inv, b) - om2 - om2.T


def _residuals(P, q_inv, S, beta):
    S = np.asarray(S, dtype=float)
    if S.ndim == 1:
        S = S[:, None]
    if beta is None:
        beta = q_inv @ (P * S).mean(axis=0)
    return S - (P @ beta)[:, None]


# ------------------------------------------------------------------ inference


def sqrt_psd(omega, rel_tol: float = 1e-8) -> np.ndarray:
    """Symmetric square root; eigenvalues down to ``-rel_tol * max|eig|`` are
    treated as zero, anything more negative raises."""
    omega = 0.5 * (np.asarray(omega, dtype=float) + np.asarray(omega, dtype=float).T)
    vals, vecs = np.linalg.eigh(omega)
    scale = max(float(np.max(np.abs(vals))), 1e-300) if vals.size else 1.0
    if vals.size and vals[0] < -rel_tol * scale:
        raise InferenceError(f"variance matrix is not PSD (min eigenvalue {vals[0]:.3g})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def sigma_hat(P_grid, omega, n: int) -> np.ndarray:
    """Standard error ``sqrt(p(x)' Omega p(x) / n)`` at each row of ``P_grid``."""
    P_grid = np.atleast_2d(np.asarray(P_grid, dtype=float))
    quad = np.einsum("ij,jk,ik->i", P_grid, omega, P_grid)
    scale = max(float(np.max(np.abs(omega))), 1e-300) * np.sum(P_grid * P_grid, axis=1)
    if np.any(quad < -1e-10 * np.maximum(scale, 1.0)):
        raise InferenceError("negative variance quadratic form")
    return np.sqrt(np.clip(quad, 0.0, None) / n)


def normal_quantile(eta: float) -> float:
    """Two-sided standard normal critical value ``z_{1 - eta/2}``."""
    if eta >= 1.0:
        return 0.0
    return float(ndtri(1.0 - eta / 2.0))


def pointwise_band(ghat, sigma, eta: float):
    z = normal_quantile(eta)
    ghat = np.asarray(ghat, dtype=float)
    half = z * np.asarray(sigma, dtype=float)
    return ghat - half, ghat + half


def sup_statistics(omega, P_grid, n_boot: int, rng) -> np.ndarray:
    """``T_b = max_x |p(x)' Omega^{1/2} N_b| / |Omega^{1/2} p(x)|``, ``N_b ~ N(0, I_k)``.

    Grid points where ``Omega^{1/2} p(x) = 0`` carry no uncertainty and are
    skipped.
    """
    P_grid = np.atleast_2d(np.asarray(P_grid, dtype=float))
    root = sqrt_psd(omega)
    A = P_grid @ root
    norms = np.linalg.norm(A, axis=1)
    keep = norms > 1e-14 * max(float(norms.max()), 1e-300)
    if not np.any(norms > 0):
        raise InferenceError("every grid point has zero standard error; uniform band is degenerate")
    A = A[keep] / norms[keep, None]
    N = rng.standard_normal((n_boot, P_grid.shape[1]))
    return np.max(np.abs(N @ A.T), axis=1)


def critical_value(stats, eta: float) -> float:
    """``ceil((1 - eta/2) B)``-th order statistic of the sup statistics."""
    stats = np.sort(np.asarray(stats, dtype=float))
    return float(stats[order_statistic_rank(1.0 - eta / 2.0, stats.size) - 1])


def uniform_critical_value(omega, P_grid, eta: float, n_boot: int, seed: int) -> float:
    rng = substream(seed, UNIFORM_BANDS)
    return critical_value(sup_statistics(omega, P_grid, n_boot, rng), eta)


# ----------------------------------------------------------------- fit object


@dataclass
class CateFit:
    """Estimated curve on a grid with pointwise and uniform bands.

    ``mode`` is ``"treated"``/``"control"`` for a conditional counterfactual
    mean or ``"cate"`` for the treated-minus-control contrast.
    """

    mode: str
    beta: np.ndarray
    omega: np.ndarray
    n: int
    grid: np.ndarray
    ghat: np.ndarray
    sigma: np.ndarray
    eta: float
    z_crit: float
    uniform_crit: float
    pointwise_lo: np.ndarray
    pointwise_hi: np.ndarray
    uniform_lo: np.ndarray
    uniform_hi: np.ndarray
    basis: BasisMatrix = field(repr=False)
    sup_stats: np.ndarray = field(repr=False)
    diagnostics: dict = field(default_factory=dict, repr=False)

    @property
    def k(self) -> int:
        return self.beta.size

    def predict(self, x) -> np.ndarray:
        P = evaluate_basis(self.basis.spec, np.atleast_1d(x), scales=self.basis.scales).values
        return P @ self.beta

    def std_error(self, x) -> np.ndarray:
        P = evaluate_basis(self.basis.spec, np.atleast_1d(x), scales=self.basis.scales).values
        return sigma_hat(P, self.omega, self.n)

    def bands(self, eta: float) -> dict:
        """Pointwise and uniform bands at another level, reusing the same
        bootstrap draws."""
        z = normal_quantile(eta)
        c = critical_value(self.sup_stats, eta)
        return {
            "z_crit": z,
            "uniform_crit": c,
            "pointwise_lo": self.ghat - z * self.sigma,
            "pointwise_hi": self.ghat + z * self.sigma,
            "uniform_lo": self.ghat - c * self.sigma,
            "uniform_hi": self.ghat + c * self.sigma,
        }

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "n": self.n,
            "k": self.k,
            "eta": self.eta,
            "beta": self.beta.tolist(),
            "omega": self.omega.tolist(),
            "basis": self.basis.spec.to_dict(),
            "basis_scales": self.basis.scales.tolist(),
            "z_crit": self.z_crit,
            "uniform_crit": self.uniform_crit,
            "grid": self.grid.tolist(),
            "ghat": self.ghat.tolist(),
            "sigma": self.sigma.tolist(),
            "pointwise_lo": self.pointwise_lo.tolist(),
            "pointwise_hi": self.pointwise_hi.tolist(),
            "uniform_lo": self.uniform_lo.tolist(),
            "uniform_hi": self.uniform_hi.tolist(),
            "diagnostics": self.diagnostics,
        }

    def to_json(self, path, extra: Optional[dict] = None) -> None:
        payload = self.to_dict()
        if extra:
            payload.update(extra)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, allow_nan=True)
            fh.write("\n")

    def to_csv(self, path) -> None:
        est = "cate" if self.mode == "cate" else "ghat"
        header = ["x", est, "sigma", "pw_lo", "pw_hi", "unif_lo", "unif_hi"]
        cols = [self.grid, self.ghat, self.sigma, self.pointwise_lo, self.pointwise_hi,
                self.uniform_lo, self.uniform_hi]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(header) + "\n")
            for row in zip(*cols):
                fh.write(",".join(f"{v:.10g}" for v in row) + "\n")


def make_grid(basis: BasisMatrix, x, cfg: EstimatorConfig) -> np.ndarray:
    if cfg.grid is not None:
        return np.asarray(cfg.grid, dtype=float)
    if basis.spec.boundary is not None:
        lo, hi = basis.spec.boundary
    else:
        lo, hi = float(np.min(x)), float(np.max(x))
    return np.linspace(lo, hi, cfg.grid_size)


def _finish(mode, beta, omega, ds, basis, cfg, seed, diagnostics) -> CateFit:
    n = ds.n
    grid = make_grid(basis, ds.x, cfg)
    P = evaluate_basis(basis.spec, grid, scales=basis.scales).values
    ghat = P @ beta
    sigma = sigma_hat(P, omega, n)
    rng = substream(seed, UNIFORM_BANDS, MODE_CODES[mode])
    stats = sup_statistics(omega, P, cfg.n_boot_uniform, rng)
    z = normal_quantile(cfg.eta)
    c = critical_value(stats, cfg.eta)
    return CateFit(
        mode=mode,
        beta=beta,
        omega=omega,
        n=n,
        grid=grid,
        ghat=ghat,
        sigma=sigma,
        eta=cfg.eta,
        z_crit=z,
        uniform_crit=c,
        pointwise_lo=ghat - z * sigma,
        pointwise_hi=ghat + z * sigma,
        uniform_lo=ghat - c * sigma,
        uniform_hi=ghat + c * sigma,
        basis=basis,
        sup_stats=stats,
        diagnostics=diagnostics,
    )


def _prepare(ds, cfg):
    basis = evaluate_basis(cfg.basis, ds.x)
    dm = design_matrix(basis)
    return basis, dm


def _base_diag(ds, basis, dm):
    return {
        "k": basis.k,
        "design_min_eigenvalue": dm.min_eigenvalue,
        "xi_inf": basis.xi_inf,
        "xi_2": basis.xi_2,
    }


def _arm_stage(nuis: ArmNuisance, basis):
    return second_stage(basis, nuis.signals, nuis.anchor_signal, basis.shift)


def fit_counterfactual(ds, cfg: EstimatorConfig = EstimatorConfig(), seed: int = 0,
                       arm: str = "treated", threads: int = 1) -> CateFit:
    """Conditional counterfactual mean ``E[Y(arm) | X = x]`` on the grid."""
    basis, dm = _prepare(ds, cfg)
    nuis = fit_first_stage(ds, basis, cfg, arm, seed, threads)
    st = _arm_stage(nuis, basis)
    diag = _base_diag(ds, basis, dm)
    diag[arm] = nuis.diagnostics()
    return _finish(arm, st.beta, st.omega(), ds, basis, cfg, seed, diag)


def fit_cate(ds, cfg: EstimatorConfig = EstimatorConfig(), seed: int = 0, threads: int = 1,
             single_arm: bool = False) -> CateFit:
    """Treated-minus-control contrast with the combined variance.

    ``single_arm=True`` returns the treated counterfactual mean only.
    """
    if single_arm:
        return fit_counterfactual(ds, cfg, seed, "treated", threads)
    basis, dm = _prepare(ds, cfg)
    n1 = fit_first_stage(ds, basis, cfg, "treated", seed, threads)
    n0 = fit_first_stage(ds, basis, cfg, "control", seed, threads)
    s1 = _arm_stage(n1, basis)
    s0 = _arm_stage(n0, basis)
    beta = s1.beta - s0.beta
    omega = sandwich(s1.q_inv, s1.scores - s0.scores)
    diag = _base_diag(ds, basis, dm)
    diag["treated"] = n1.diagnostics()
    diag["control"] = n0.diagnostics()
    diag["beta_treated"] = s1.beta.tolist()
    diag["beta_control"] = s0.beta.tolist()
    return _finish("cate", beta, omega, ds, basis, cfg, seed, diag)
