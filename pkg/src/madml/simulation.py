"""Monte Carlo designs with a correctly specified model, a misspecified
outcome regression, and a misspecified propensity score, plus the
replication harness comparing the model-assisted estimator to the standard
single-pair benchmark.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.linalg import cholesky, toeplitz
from scipy.special import expit
from scipy.stats import norm

from ._rng import SIM_CALIBRATE, SIM_REP, substream
from .dataset import INTERCEPT_NAME, Dataset
from .estimator import EstimatorConfig, fit_counterfactual
from .exceptions import CalibrationError, ConfigError, MadmlError

DGPS = ("S1", "S2", "S3")
DEFAULT_SPARSITY = {"S1": 6, "S2": 4, "S3": 5}
# E[max(0, 1 + Z)^2] for Z ~ N(0, 1)
DAGGER_SHIFT = 2.0 * norm.cdf(1.0) + norm.pdf(1.0)
X_SUPPORT = (1.0, 2.0)


@lru_cache(maxsize=16)
def _toeplitz_factor(d: int) -> np.ndarray:
    cov = toeplitz(0.5 ** np.arange(d))
    return cholesky(cov, lower=False)


def toeplitz_gaussian(n: int, d: int, rng) -> np.ndarray:
    """Rows i.i.d. N(0, Sigma) with ``Sigma_jk = 2^{-|j-k|}``."""
    if d < 1:
        raise ConfigError("d must be at least 1")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return rng.standard_normal((n, d)) @ _toeplitz_factor(d)


def transform_dagger(z):
    """``z + max(0, 1 + z)^2`` elementwise."""
    z = np.asarray(z, dtype=float)
    return z + np.maximum(0.0, 1.0 + z) ** 2


@dataclass(frozen=True)
class DgpConfig:
    """One simulation design.

    The controls are ``[1, X, X^2, Z_1]`` with ``Z_1`` holding ``d_z - 2``
    Toeplitz Gaussian columns, so there are ``d_z + 1`` columns in all.
    ``gamma_scale`` is the common value of the ``sparsity`` active
    coefficients (default ``1/sqrt(sparsity)``); ``intercept=None`` means
    calibrate it so the mean treatment probability is ``target_prob``.
    """

    dgp: str = "S1"
    n: int = 500
    d_z: int = 100
    sparsity: Optional[int] = None
    intercept: Optional[float] = None
    gamma_scale: Optional[float] = None
    target_prob: float = 0.5

    def __post_init__(self):
        dgp = str(self.dgp).upper()
        if dgp not in DGPS:
            raise ConfigError(f"dgp must be one of {DGPS}, got {self.dgp!r}")
        object.__setattr__(self, "dgp", dgp)
        if self.sparsity is None:
            object.__setattr__(self, "sparsity", DEFAULT_SPARSITY[dgp])
        if self.n < 10:
            raise ConfigError("n must be at least 10")
        if self.d_z < 3:
            raise ConfigError("d_z must be at least 3")
        if not 0 <= self.sparsity <= self.d_z - 2:
            raise ConfigError("sparsity must lie in [0, d_z - 2]")
        if not 0 < self.target_prob < 1:
            raise ConfigError("target_prob must lie in (0, 1)")

    @property
    def gamma(self) -> np.ndarray:
        g = np.zeros(self.d_z - 2)
        if self.sparsity:
            scale = 1.0 / math.sqrt(self.sparsity) if self.gamma_scale is None else self.gamma_scale
            g[: self.sparsity] = scale
        return g


@dataclass(frozen=True)
class GroundTruth:
    """``g_0(x) = E[Y(1) | X = x] = 1 + x + x^2/2 + shift``."""

    shift: float = 0.0

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return 1.0 + x + 0.5 * x * x + self.shift


def ground_truth(cfg: DgpConfig) -> GroundTruth:
    if cfg.dgp == "S2":
        return GroundTruth(float(cfg.gamma.sum()) * DAGGER_SHIFT)
    return GroundTruth(0.0)


def _index(cfg: DgpConfig, x, z1, intercept):
    """Linear index inside the logistic link of ``P(D = 1 | Z)``."""
    g = cfg.gamma
    base = x + 0.5 * x * x - intercept
    if cfg.dgp == "S3":
        return base - transform_dagger(z1) @ g
    return base + z1 @ g


def calibrate_intercept(cfg: DgpConfig, seed: int = 0, n_draw: int = 100_000,
                        bracket=(-50.0, 50.0), tol: float = 1e-10) -> float:
    """Intercept making the mean treatment probability equal ``target_prob``
    on a fixed Monte Carlo draw, found by bisection."""
    return _calibrate_cached(replace(cfg, n=10, intercept=None), int(seed), int(n_draw),
                             tuple(bracket), tol)


@lru_cache(maxsize=64)
def _calibrate_cached(cfg, seed, n_draw, bracket, tol):
    rng = substream(seed, SIM_CALIBRATE)
    x = rng.uniform(*X_SUPPORT, n_draw)
    z1 = toeplitz_gaussian(n_draw, cfg.d_z - 2, rng)
    rest = _index(cfg, x, z1, 0.0)

    def excess(p):
        return float(np.mean(expit(rest - p))) - cfg.target_prob

    lo, hi = bracket
    f_lo, f_hi = excess(lo), excess(hi)
    if not (f_lo > 0 > f_hi):
        raise CalibrationError(f"bracket {bracket} does not straddle the target probability")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if excess(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate(cfg: DgpConfig, rng, intercept: Optional[float] = None):
    """Draw one sample; returns ``(Dataset, GroundTruth)``."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if intercept is None:
        intercept = cfg.intercept if cfg.intercept is not None else calibrate_intercept(cfg)
    n = cfg.n
    x = rng.uniform(*X_SUPPORT, n)
    z1 = toeplitz_gaussian(n, cfg.d_z - 2, rng)
    eps = rng.standard_normal(n)
    u = rng.uniform(size=n)
    d = (u < expit(_index(cfg, x, z1, intercept))).astype(float)
    w = transform_dagger(z1) if cfg.dgp == "S2" else z1
    y = d * (1.0 + x + 0.5 * x * x + w @ cfg.gamma) + eps
    z = np.column_stack([np.ones(n), x, x * x, z1])
    names = (INTERCEPT_NAME, "x", "x2") + tuple(f"z1_{j + 1}" for j in range(z1.shape[1]))
    return Dataset(y=y, d=d, x=x, z=z, z_names=names), ground_truth(cfg)


# ---------------------------------------------------------------- replication

ESTIMATORS = ("MA-DML", "DML")
METRIC_COLUMNS = ("ibias2", "ivar", "imse", "cov90", "cov95", "ucov90", "ucov95")


def default_estimators(base: Optional[EstimatorConfig] = None) -> dict:
    """The model-assisted estimator and the standard benchmark, both with the
    basis support pinned to the support of X."""
    base = base or EstimatorConfig()
    basis = base.basis
    if basis.knots is None and basis.boundary is None:
        basis = replace(basis, boundary=X_SUPPORT)
    base = replace(base, basis=basis)
    return {"MA-DML": replace(base, style="model_assisted"), "DML": replace(base, style="standard")}


@dataclass
class RepResult:
    rep: int
    estimator: str
    ok: bool
    error: str = ""
    ghat: Optional[list] = None
    cover90: bool = False
    cover95: bool = False
    ucover90: bool = False
    ucover95: bool = False
    ucover_nested95: bool = True
    diagnostics: dict = field(default_factory=dict)


def _evaluate(fit, truth, grid, x0=1.5):
    g0 = truth(grid)
    out = {}
    g_mid = float(fit.predict(x0)[0])
    se_mid = float(fit.std_error(x0)[0])
    t_mid = float(truth(x0))
    for eta, tag in ((0.10, "90"), (0.05, "95")):
        b = fit.bands(eta)
        out["cover" + tag] = abs(g_mid - t_mid) <= b["z_crit"] * se_mid
        out["ucover" + tag] = bool(np.all((b["uniform_lo"] <= g0) & (g0 <= b["uniform_hi"])))
        if tag == "95":
            # a band covering g_0 everywhere must cover at x0 with the wider width
            inside = abs(g_mid - t_mid) <= b["uniform_crit"] * se_mid
            out["ucover_nested95"] = (not out["ucover95"]) or inside or not _grid_has(grid, x0)
    return out


def _grid_has(grid, x0):
    return bool(np.any(np.isclose(grid, x0, rtol=0, atol=1e-12)))


def run_replication(dgp: DgpConfig, estimators: dict, rep: int, seed: int, intercept: float,
                    grid) -> list:
    """Generate one sample and fit every estimator on it."""
    rng = substream(seed, SIM_REP, rep)
    ds, truth = generate(dgp, rng, intercept)
    fit_seed = int(substream(seed, SIM_REP, rep, 1).integers(0, 2**63 - 1))
    results = []
    for name, cfg in estimators.items():
        cfg = replace(cfg, grid=tuple(grid))
        try:
            fit = fit_counterfactual(ds, cfg, seed=fit_seed, arm="treated")
        except MadmlError as exc:
            results.append(RepResult(rep, name, False, f"{type(exc).__name__}: {exc}"))
            continue
        ev = _evaluate(fit, truth, np.asarray(grid))
        diag = fit.diagnostics.get("treated", {})
        results.append(RepResult(
            rep, name, True, "", fit.ghat.tolist(),
            ev["cover90"], ev["cover95"], ev["ucover90"], ev["ucover95"], ev["ucover_nested95"],
            {
                "lam_gamma": [p["lam_gamma"] for p in diag.get("penalties", [])],
                "foc_norm": diag.get("foc_norm", []),
                "propensity_clips": diag.get("propensity_clips", []),
                "outcome_clips": diag.get("outcome_clips", []),
                "kkt_gamma": diag.get("kkt_gamma", []),
                "kkt_alpha": diag.get("kkt_alpha", []),
                "uniform_crit": fit.uniform_crit,
            },
        ))
    return results


def _rep_task(args):
    return run_replication(*args)


def integrated_metrics(ghats, g0, grid) -> dict:
    """IBias^2, IVar and IMSE by the trapezoid rule over ``grid``."""
    ghats = np.asarray(ghats, dtype=float)
    g0 = np.asarray(g0, dtype=float)
    gbar = ghats.mean(axis=0)
    ibias2 = float(np.trapezoid((gbar - g0) ** 2, grid))
    ivar = float(np.mean(np.trapezoid((ghats - gbar) ** 2, grid, axis=1)))
    imse = float(np.mean(np.trapezoid((ghats - g0) ** 2, grid, axis=1)))
    return {"ibias2": ibias2, "ivar": ivar, "imse": imse}


@dataclass
class SimulationReport:
    dgp: DgpConfig
    reps: int
    seed: int
    intercept: float
    grid: np.ndarray
    rows: list
    replications: list = field(repr=False, default_factory=list)
    wall_time: Optional[float] = field(default=None, compare=False)

    def row(self, estimator: str) -> dict:
        for r in self.rows:
            if r["estimator"] == estimator:
                return r
        raise KeyError(estimator)

    def to_csv(self, path) -> None:
        cols = ["dgp", "n", "estimator"] + list(METRIC_COLUMNS) + ["reps", "failures", "valid"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(cols)
            for r in self.rows:
                wr.writerow([_fmt(r[c]) for c in cols])

    def to_dict(self) -> dict:
        return {
            "dgp": asdict(self.dgp),
            "reps": self.reps,
            "seed": self.seed,
            "intercept": self.intercept,
            "gamma": self.dgp.gamma.tolist(),
            "grid": self.grid.tolist(),
            "rows": self.rows,
            "replications": [asdict(r) for r in self.replications],
        }

    def to_json(self, path, extra: Optional[dict] = None) -> None:
        payload = self.to_dict()
        if extra:
            payload.update(extra)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def aggregate(results: list, estimators, truth: GroundTruth, grid, reps: int, dgp: DgpConfig) -> list:
    rows = []
    g0 = truth(grid)
    for name in estimators:
        mine = [r for r in results if r.estimator == name]
        ok = [r for r in mine if r.ok]
        failures = len(mine) - len(ok)
        row = {"dgp": dgp.dgp, "n": dgp.n, "estimator": name}
        if ok:
            row.update(integrated_metrics([r.ghat for r in ok], g0, grid))
            for key, attr in (("cov90", "cover90"), ("cov95", "cover95"),
                              ("ucov90", "ucover90"), ("ucov95", "ucover95")):
                row[key] = float(np.mean([getattr(r, attr) for r in ok]))
        else:
            row.update({c: float("nan") for c in METRIC_COLUMNS})
        row["reps"] = len(ok)
        row["failures"] = failures
        row["valid"] = failures <= 0.05 * reps
        rows.append(row)
    return rows


def run_monte_carlo(dgp: DgpConfig, estimators: Optional[dict] = None, reps: int = 200,
                    seed: int = 0, grid=None, workers: int = 1) -> SimulationReport:
    """Replicate ``reps`` samples and summarise every estimator.

    Replication ``s`` draws its data from a substream keyed by ``(seed, s)``,
    so the report does not depend on ``workers``.  Failed fits are excluded
    and counted; a row is flagged invalid above 5% failures.
    """
    if reps < 2:
        raise ConfigError("reps must be at least 2")
    estimators = estimators or default_estimators()
    grid = np.linspace(*X_SUPPORT, 100) if grid is None else np.asarray(grid, dtype=float)
    intercept = dgp.intercept if dgp.intercept is not None else calibrate_intercept(dgp)
    tasks = [(dgp, estimators, s, seed, intercept, grid) for s in range(reps)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_rep_task, tasks))
    else:
        chunks = [_rep_task(t) for t in tasks]
    results = [r for chunk in chunks for r in chunk]
    rows = aggregate(results, list(estimators), ground_truth(dgp), grid, reps, dgp)
    return SimulationReport(dgp, reps, seed, intercept, grid, rows, results)
