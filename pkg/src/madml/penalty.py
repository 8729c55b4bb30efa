"""Data-driven penalty levels for the first-stage programs.

The default route picks pilot constants by K-fold cross validation, fits
pilot models, and sets each final penalty to ``c0`` times a multiplier
bootstrap quantile of the maximal score.  ``method="cv_only"`` uses the
cross-validated pilot penalties directly.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import firststage as fs
from ._rng import ARM_CODES, CV_FOLDS, PENALTY_BOOT, substream
from .exceptions import ConfigError, DivergenceError, SelectionError, SolverError
from .solver import DEFAULT_SOLVER, SolverConfig

METHODS = ("bootstrap", "cv_only")


@dataclass(frozen=True)
class PenaltyConfig:
    c0: float = 1.1
    eps: float = 0.05
    n_boot: int = 10_000
    pilot_candidates: Optional[tuple] = None
    n_candidates: int = 5
    cv_folds: int = 5
    ratio_divisor: float = 5.0
    method: str = "bootstrap"
    c0_per_term: Optional[tuple] = None

    def __post_init__(self):
        if not self.c0 > 1:
            raise ConfigError("c0 must exceed 1")
        if not 0 < self.eps < 1:
            raise ConfigError("eps must lie in (0, 1)")
        if self.n_boot < 1:
            raise ConfigError("n_boot must be at least 1")
        if self.cv_folds < 2:
            raise ConfigError("cv_folds must be at least 2")
        if self.ratio_divisor <= 0:
            raise ConfigError("ratio_divisor must be positive")
        if self.method not in METHODS:
            raise ConfigError(f"penalty method must be one of {METHODS}")
        if self.n_candidates < 1:
            raise ConfigError("n_candidates must be at least 1")
        if self.pilot_candidates is not None:
            cands = tuple(float(c) for c in self.pilot_candidates)
            if not cands or any(c <= 0 for c in cands):
                raise ConfigError("pilot candidates must be positive")
            object.__setattr__(self, "pilot_candidates", cands)
        if self.c0_per_term is not None:
            object.__setattr__(self, "c0_per_term", tuple(float(c) for c in self.c0_per_term))
            if any(c <= 1 for c in self.c0_per_term):
                raise ConfigError("every per-term c0 must exceed 1")

    def c0_for(self, j: int) -> float:
        if self.c0_per_term is not None and j < len(self.c0_per_term):
            return self.c0_per_term[j]
        return self.c0


def pilot_penalty(c: float, d_z: int, n: int) -> float:
    """``c * sqrt(ln(d_z)^3 / n)``."""
    return c * math.sqrt(math.log(d_z) ** 3 / n)


def order_statistic_rank(level: float, B: int) -> int:
    """``ceil(level * B)`` clamped to ``[1, B]``; guards 0.95*100 = 95.00000000000001."""
    return min(B, max(1, int(math.ceil(round(level * B, 9)))))


def enforce_ratio(lam_gamma: float, lam_alpha: float, divisor: float = 5.0) -> float:
    return max(lam_gamma / divisor, lam_alpha)


def bootstrap_statistics(U_list, Z, multipliers) -> list:
    """Max-score statistics ``T_b = max_l |mean_i(e_bi U_i Z_il)|`` for each
    residual vector in ``U_list``, sharing the same multiplier draws."""
    n = Z.shape[0]
    stacked = np.hstack([U[:, None] * Z for U in U_list])
    M = multipliers @ stacked / n
    d = Z.shape[1]
    return [np.max(np.abs(M[:, i * d:(i + 1) * d]), axis=1) for i in range(len(U_list))]


def draw_multipliers(rng, B: int, n: int, chunk: int = 2000):
    """Standard normal ``B x n`` multipliers drawn row-block by row-block."""
    for start in range(0, B, chunk):
        yield rng.standard_normal((min(chunk, B - start), n))


def bootstrap_penalties(U_list, Z, c0_list, eps: float, n_boot: int, rng) -> list:
    """Final penalties for several residual vectors sharing one multiplier
    stream: ``c0 x`` the ``ceil((1-eps) B)``-th order statistic of ``T_b``."""
    stats = [[] for _ in U_list]
    for e in draw_multipliers(rng, n_boot, Z.shape[0]):
        for acc, T in zip(stats, bootstrap_statistics(U_list, Z, e)):
            acc.append(T)
    rank = order_statistic_rank(1.0 - eps, n_boot)
    out = []
    for c0, parts in zip(c0_list, stats):
        T = np.sort(np.concatenate(parts))
        out.append(c0 * float(T[rank - 1]))
    return out


def bootstrap_penalty(U, Z, cfg: PenaltyConfig, rng, c0: Optional[float] = None) -> float:
    """Single-residual version of :func:`bootstrap_penalties`."""
    return bootstrap_penalties([np.asarray(U, float)], np.asarray(Z, float),
                               [cfg.c0 if c0 is None else c0], cfg.eps, cfg.n_boot, rng)[0]


def estimate_residuals(ds, w, gamma, alpha, style="model_assisted", arm="treated"):
    """Plug-in residuals ``(U_gamma, U_alpha)`` at pilot coefficients."""
    return fs.residuals(style, arm, w, ds.d, ds.z, ds.y, gamma, alpha)


def make_folds(d, K: int, rng) -> np.ndarray:
    """Fold labels stratified by treatment so every fold holds both arms."""
    d = np.asarray(d)
    folds = np.empty(d.shape[0], dtype=int)
    for arm in (0.0, 1.0):
        idx = np.flatnonzero(d == arm)
        if idx.size < K:
            raise SelectionError(f"only {idx.size} rows in treatment arm {int(arm)}; need at least {K} folds' worth")
        perm = rng.permutation(idx)
        folds[perm] = np.arange(perm.size) % K
    return folds


@dataclass
class CvSelection:
    c_gamma: float
    c_alpha: float
    candidates: tuple
    gamma_losses: Optional[np.ndarray] = None
    alpha_losses: Optional[np.ndarray] = None


def _argmin_prefer_larger(cands_desc, losses):
    best = 0
    for i in range(1, len(cands_desc)):
        if losses[i] < losses[best]:
            best = i
    return best


def cv_select_constants(ds, w, candidates: Sequence[float], folds, style="model_assisted",
                        arm="treated", solver_cfg: SolverConfig = DEFAULT_SOLVER) -> CvSelection:
    """Choose pilot constants ``(c_gamma, c_alpha)`` by K-fold cross validation.

    Propensity candidates are scored by the held-out unpenalised propensity
    loss; outcome candidates by the held-out weighted squared loss, using the
    propensity fit at the selected ``c_gamma``.  Ties go to the larger
    constant.
    """
    cands = tuple(sorted(set(float(c) for c in candidates), reverse=True))
    if not cands:
        raise SelectionError("empty candidate set")
    if len(cands) == 1:
        return CvSelection(cands[0], cands[0], cands)
    Z, D, Y = ds.z, ds.d, ds.y
    d_z = ds.d_z
    K = int(folds.max()) + 1
    g_loss = np.zeros((K, len(cands)))
    gammas = {}
    for f in range(K):
        tr = folds != f
        te = ~tr
        n_tr = int(tr.sum())
        x0 = None
        for ci, c in enumerate(cands):
            lam = pilot_penalty(c, d_z, n_tr)
            try:
                res = fs.fit_gamma(style, arm, w[tr], D[tr], Z[tr], lam, solver_cfg, x0=x0)
            except (DivergenceError, SolverError):
                g_loss[f, ci:] = np.inf
                break
            x0 = res.coef
            gammas[f, ci] = res.coef
            g_loss[f, ci] = fs.gamma_loss(style, arm, w[te], D[te], Z[te], res.coef)
    g_mean = g_loss.mean(axis=0)
    if not np.any(np.isfinite(g_mean)):
        raise SelectionError(f"every propensity candidate diverged in some fold (candidates {cands})")
    gi = _argmin_prefer_larger(cands, g_mean)

    a_loss = np.zeros((K, len(cands)))
    for f in range(K):
        tr = folds != f
        te = ~tr
        n_tr = int(tr.sum())
        gamma = gammas[f, gi]
        v = fs.outcome_weights(style, arm, D, Z, gamma)
        x0 = None
        for ci, c in enumerate(cands):
            lam = pilot_penalty(c, d_z, n_tr)
            try:
                res = fs.fit_alpha(w[tr], v[tr], Z[tr], Y[tr], lam, solver_cfg, x0=x0)
            except SolverError:
                a_loss[f, ci] = np.inf
                continue
            x0 = res.coef
            a_loss[f, ci] = fs.alpha_loss(w[te], v[te], Z[te], Y[te], res.coef)
    a_mean = a_loss.mean(axis=0)
    if not np.any(np.isfinite(a_mean)):
        raise SelectionError("every outcome-model candidate failed")
    ai = _argmin_prefer_larger(cands, a_mean)
    return CvSelection(cands[gi], cands[ai], cands, g_mean, a_mean)


def default_candidates(W, cfg: PenaltyConfig) -> tuple:
    """Log-spaced pilot constants on the scale of ``max_i |p(X_i)|_inf``."""
    if cfg.pilot_candidates is not None:
        return cfg.pilot_candidates
    scale = float(np.max(np.abs(W)))
    return tuple((scale * np.geomspace(0.1, 1.6, cfg.n_candidates)).tolist())


def cv_interval_candidates(W, Z, n_candidates: int) -> tuple:
    """Evenly spaced constants between the recommended lower/upper endpoints
    ``max|p| max|Z| / (2 sqrt(log(d_z n)))`` and ``1.5 sqrt(log(d_z n)) max|p| max|Z|``."""
    n, d_z = Z.shape
    base = float(np.max(np.abs(W))) * float(np.max(np.abs(Z)))
    root = math.sqrt(math.log(d_z * n))
    lo = base / (2.0 * root)
    hi = 1.5 * root * base
    if n_candidates == 1:
        return (lo,)
    return tuple(np.linspace(lo, hi, n_candidates).tolist())


@dataclass
class PenaltyChoice:
    """Penalties for one first-stage pair plus how they were obtained."""

    lam_gamma: float
    lam_alpha: float
    lam_alpha_unratioed: float
    c_gamma: float
    c_alpha: float
    method: str
    pilot_lam_gamma: float = float("nan")
    pilot_lam_alpha: float = float("nan")
    pilot_gamma: Optional[np.ndarray] = field(default=None, repr=False)
    pilot_alpha: Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "lam_gamma": self.lam_gamma,
            "lam_alpha": self.lam_alpha,
            "lam_alpha_unratioed": self.lam_alpha_unratioed,
            "c_gamma": self.c_gamma,
            "c_alpha": self.c_alpha,
            "method": self.method,
            "pilot_lam_gamma": self.pilot_lam_gamma,
            "pilot_lam_alpha": self.pilot_lam_alpha,
        }


def select_one(ds, w, j: int, cfg: PenaltyConfig, folds, seed: int, style="model_assisted",
               arm="treated", solver_cfg: SolverConfig = DEFAULT_SOLVER, candidates=None) -> PenaltyChoice:
    """Penalties for the pair weighted by column ``w`` (term index ``j``)."""
    n, d_z = ds.n, ds.d_z
    if candidates is None:
        candidates = default_candidates(w, cfg)
    sel = cv_select_constants(ds, w, candidates, folds, style, arm, solver_cfg)
    pil_g = pilot_penalty(sel.c_gamma, d_z, n)
    pil_a = pilot_penalty(sel.c_alpha, d_z, n)
    if cfg.method == "cv_only":
        lam_a = enforce_ratio(pil_g, pil_a, cfg.ratio_divisor)
        return PenaltyChoice(pil_g, lam_a, pil_a, sel.c_gamma, sel.c_alpha, "cv_only", pil_g, pil_a)
    g = fs.fit_gamma(style, arm, w, ds.d, ds.z, pil_g, solver_cfg)
    v = fs.outcome_weights(style, arm, ds.d, ds.z, g.coef)
    a = fs.fit_alpha(w, v, ds.z, ds.y, pil_a, solver_cfg)
    U_g, U_a = fs.residuals(style, arm, w, ds.d, ds.z, ds.y, g.coef, a.coef)
    # one multiplier stream per (arm, style), shared by every term: identical
    # weight columns then receive identical penalties
    rng = substream(seed, PENALTY_BOOT, ARM_CODES[arm], 0 if style == "model_assisted" else 1)
    c0 = cfg.c0_for(j)
    lam_g, lam_a = bootstrap_penalties([U_g, U_a], ds.z, [c0, c0], cfg.eps, cfg.n_boot, rng)
    return PenaltyChoice(
        lam_g,
        enforce_ratio(lam_g, lam_a, cfg.ratio_divisor),
        lam_a,
        sel.c_gamma,
        sel.c_alpha,
        "bootstrap",
        pil_g,
        pil_a,
        g.coef,
        a.coef,
    )


def select_penalties(ds, W, cfg: PenaltyConfig, seed: int = 0, style="model_assisted",
                     arm="treated", solver_cfg: SolverConfig = DEFAULT_SOLVER,
                     threads: int = 1) -> list:
    """Penalty pairs for every column of the first-stage weight matrix ``W``."""
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        W = W[:, None]
    folds = make_folds(ds.d, cfg.cv_folds, substream(seed, CV_FOLDS)) if _needs_cv(cfg, W) else None
    if cfg.method == "cv_only" and cfg.pilot_candidates is None:
        cand_for = lambda j: cv_interval_candidates(W, ds.z, cfg.n_candidates)
    else:
        cand_for = lambda j: default_candidates(W, cfg)

    def task(j):
        return select_one(ds, W[:, j], j, cfg, folds, seed, style, arm, solver_cfg, cand_for(j))

    if threads > 1 and W.shape[1] > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(task, range(W.shape[1])))
    return [task(j) for j in range(W.shape[1])]


def _needs_cv(cfg, W):
    if cfg.pilot_candidates is not None:
        return len(set(cfg.pilot_candidates)) > 1
    return cfg.n_candidates > 1
