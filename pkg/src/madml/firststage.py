"""Per-model pieces of the first stage: which program to solve, the outcome
weights it induces, held-out losses and plug-in residuals.

``style`` is ``"model_assisted"`` (calibrated losses, one pair per basis
term) or ``"standard"`` (l1 logistic likelihood and least squares, the
benchmark).  ``arm`` is ``"treated"`` or ``"control"``.
"""
import numpy as np

from . import solver as _s

STYLES = ("model_assisted", "standard")
ARMS = ("treated", "control")


def _clip_exp(a):
    return np.exp(np.clip(a, -_s.EXP_CLAMP, _s.EXP_CLAMP))


def gamma_problem(style, arm, w, D, Z, lam, pf=None):
    if style == "standard":
        kind = "logistic_mle"
    elif arm == "treated":
        kind = "calibrated_logistic_treated"
    else:
        kind = "calibrated_logistic_control"
    return _s.PenalizedProblem(kind, w, Z, treatment=D, lam=lam, penalty_factors=pf)


def fit_gamma(style, arm, w, D, Z, lam, cfg, x0=None, kernel=None):
    prob = gamma_problem(style, arm, w, D, Z, lam, cfg.penalty_factors(Z.shape[1]))
    return _s.solve(prob, cfg, x0=x0, kernel=kernel)


def outcome_weights(style, arm, D, Z, gamma):
    """The ``v`` multiplying ``w`` in the outcome-regression program."""
    if style == "standard":
        return D.copy() if arm == "treated" else 1.0 - D
    eta = Z @ gamma
    if arm == "treated":
        return D * _clip_exp(-eta)
    return (1.0 - D) * _clip_exp(eta)


def fit_alpha(w, v, Z, Y, lam, cfg, x0=None, kernel=None):
    prob = _s.PenalizedProblem("weighted_squares", w, Z, outcome=Y, exp_weights=v, lam=lam,
                               penalty_factors=cfg.penalty_factors(Z.shape[1]))
    return _s.solve(prob, cfg, x0=x0, kernel=kernel)


def gamma_loss(style, arm, w, D, Z, gamma):
    """Unpenalised propensity-model loss (mean over rows)."""
    return gamma_problem(style, arm, w, D, Z, 0.0).smooth(gamma)[0]


def alpha_loss(w, v, Z, Y, alpha):
    r = Y - Z @ alpha
    return 0.5 * float(np.mean(w * v * r * r))


def residuals(style, arm, w, D, Z, Y, gamma, alpha):
    """Plug-in residuals ``(U_gamma, U_alpha)`` feeding the bootstrap."""
    eta = Z @ gamma
    fit = Z @ alpha
    if style == "standard":
        p = 1.0 / (1.0 + _clip_exp(-eta))
        v = D if arm == "treated" else 1.0 - D
        return w * (D - p), w * v * (Y - fit)
    if arm == "treated":
        e = _clip_exp(-eta)
        return -w * (D * e + (1.0 - D)), w * D * e * (Y - fit)
    e = _clip_exp(eta)
    return -w * ((1.0 - D) * e + D), w * (1.0 - D) * e * (Y - fit)
