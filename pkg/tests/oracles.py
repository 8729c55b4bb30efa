"""Independent reference implementations used as test oracles.

These are deliberately written differently from the package code (scalar
loops, textbook formulas, brute force) so that agreement is meaningful.
"""
import itertools
import math

import numpy as np


def cox_de_boor(x, t, j, r):
    """Textbook Cox-de Boor B_{j,r}(x) (order r, i.e. degree r-1) on knot
    vector ``t`` with half-open cells and the last nonempty cell closed."""
    if r == 1:
        if t[j] <= x < t[j + 1]:
            return 1.0
        last = max(i for i in range(len(t) - 1) if t[i] < t[i + 1])
        return 1.0 if (j == last and x == t[-1]) else 0.0
    out = 0.0
    den1 = t[j + r - 1] - t[j]
    if den1 > 0:
        out += (x - t[j]) / den1 * cox_de_boor(x, t, j, r - 1)
    den2 = t[j + r] - t[j + 1]
    if den2 > 0:
        out += (t[j + r] - x) / den2 * cox_de_boor(x, t, j + 1, r - 1)
    return out


def clamped_bspline_row(x, breakpoints, degree):
    t = [breakpoints[0]] * degree + list(breakpoints) + [breakpoints[-1]] * degree
    k = len(breakpoints) - 1 + degree
    return [cox_de_boor(x, t, j, degree + 1) for j in range(k)]


def _penalty(lam, G):
    return lam * np.sum(np.abs(G), axis=0)


def calibrated_treated_objective(w, D, Z, lam, G):
    """Objective at each column of ``G`` (d x M)."""
    eta = Z @ G
    return np.mean(w[:, None] * (D[:, None] * np.exp(-eta) + (1 - D)[:, None] * eta), axis=0) + _penalty(lam, G)


def calibrated_control_objective(w, D, Z, lam, G):
    eta = Z @ G
    return np.mean(w[:, None] * ((1 - D)[:, None] * np.exp(eta) - D[:, None] * eta), axis=0) + _penalty(lam, G)


def weighted_squares_objective(w, v, Z, Y, lam, G):
    r = Y[:, None] - Z @ G
    return 0.5 * np.mean((w * v)[:, None] * r * r, axis=0) + _penalty(lam, G)


def logistic_objective(w, D, Z, lam, G):
    eta = Z @ G
    return np.mean(w[:, None] * (np.logaddexp(0.0, eta) - D[:, None] * eta), axis=0) + _penalty(lam, G)


def grid_minimum(objective, d, lo=-3.0, hi=3.0, step=1e-3, coarse_step=0.02):
    """Brute-force minimum of a convex ``objective`` over the regular grid of
    spacing ``step`` on [lo, hi]^d: a coarse pass locates the basin, then the
    full-resolution grid is searched in a window around it."""
    coarse = np.arange(lo, hi + coarse_step / 2, coarse_step)
    G = np.array(np.meshgrid(*([coarse] * d), indexing="ij")).reshape(d, -1)
    vals = objective(G)
    centre = G[:, int(np.argmin(vals))]
    half = int(round(1.5 * coarse_step / step))
    offsets = np.arange(-half, half + 1) * step
    axes = [np.clip(c + offsets, lo, hi) for c in centre]
    G = np.array(np.meshgrid(*axes, indexing="ij")).reshape(d, -1)
    vals = objective(G)
    i = int(np.argmin(vals))
    return float(vals[i]), G[:, i]


def bounded_instance(rng, n, d, outer_arm=1, weights=True):
    """Random ``(w, D, Z)`` with an intercept column whose calibrated loss is
    bounded below even at lambda = 0: rows of the inner arm are strictly
    positive convex combinations of the outer arm's rows, so the inner arm's
    mean covariate lies inside the cone spanned by the outer arm."""
    n_out = max(d + 1, n // 2)
    n_in = n - n_out
    outer = rng.standard_normal((n_out, d - 1)) * 1.5
    mix = rng.dirichlet(np.ones(n_out), size=n_in)
    inner = mix @ outer
    X = np.vstack([outer, inner])
    Z = np.column_stack([np.ones(n), X])
    D = np.r_[np.full(n_out, float(outer_arm)), np.full(n_in, 1.0 - outer_arm)]
    perm = rng.permutation(n)
    w = rng.uniform(0.2, 2.0, n) if weights else np.ones(n)
    return w[perm], D[perm], Z[perm]


def half_normal_quantile(p):
    """Quantile of |N(0,1)| by bisection on erf."""
    lo, hi = 0.0, 10.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if math.erf(mid / math.sqrt(2.0)) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


OBJECTIVES = {
    "calibrated_logistic_treated": lambda p, G: calibrated_treated_objective(p.weights, p.treatment, p.covariates, p.lam, G),
    "calibrated_logistic_control": lambda p, G: calibrated_control_objective(p.weights, p.treatment, p.covariates, p.lam, G),
    "weighted_squares": lambda p, G: weighted_squares_objective(p.weights, p.exp_weights, p.covariates, p.outcome, p.lam, G),
    "logistic_mle": lambda p, G: logistic_objective(p.weights, p.treatment, p.covariates, p.lam, G),
}


def random_problem(rng, loss, n=20, d=2, lam_range=(0.02, 1.2)):
    """A bounded random instance of ``loss`` with lambda drawn as a fraction
    of the zero-solution threshold."""
    from madml.solver import PenalizedProblem, zero_threshold

    if loss == "calibrated_logistic_control":
        w, D, Z = bounded_instance(rng, n, d, outer_arm=0)
    else:
        w, D, Z = bounded_instance(rng, n, d, outer_arm=1)
    if loss == "weighted_squares":
        Y = Z @ rng.normal(0, 1, d) + rng.normal(0, 0.5, n)
        v = D * rng.uniform(0.5, 2.0, n) + (1 - D) * rng.uniform(0, 0.2, n)
        base = PenalizedProblem(loss, w, Z, outcome=Y, exp_weights=v)
    else:
        base = PenalizedProblem(loss, w, Z, treatment=D)
    lam = rng.uniform(*lam_range) * zero_threshold(base)
    base.lam = lam
    return base


def toy_world(rng):
    """Discrete world: X in {0, 1}, Z = (X, V) with V in {0..3}; outcome Y(a)
    takes two values given Z."""
    support = list(itertools.product([0, 1], range(4)))
    pz = rng.dirichlet(np.ones(len(support)))
    pi_true = rng.uniform(0.1, 0.9, len(support))
    y_lo = rng.normal(0, 1, (2, len(support)))
    y_hi = y_lo + rng.uniform(0.5, 2, (2, len(support)))
    q_hi = rng.uniform(0.1, 0.9, (2, len(support)))
    return support, pz, pi_true, y_lo, y_hi, q_hi


def dr_expectation(world, signal, arm, pi, m, p):
    """Exact E[p(X) * signal] by enumerating Z, D and Y(arm)."""
    support, pz, pi_true, y_lo, y_hi, q_hi = world
    a = 1 if arm == "treated" else 0
    total = 0.0
    for zi, (x, _) in enumerate(support):
        for d in (0, 1):
            pd = pi_true[zi] if d == 1 else 1 - pi_true[zi]
            if d != a:
                # outcome unobserved in this arm: the signal does not depend on y
                total += pz[zi] * pd * p[x] * float(signal(0.0, d, pi[zi], m[zi]))
                continue
            for y, py in ((y_hi[a, zi], q_hi[a, zi]), (y_lo[a, zi], 1 - q_hi[a, zi])):
                total += pz[zi] * pd * py * p[x] * float(signal(y, d, pi[zi], m[zi]))
    return total


def toy_target(world, arm, p):
    support, pz, _, y_lo, y_hi, q_hi = world
    a = 1 if arm == "treated" else 0
    m_true = q_hi[a] * y_hi[a] + (1 - q_hi[a]) * y_lo[a]
    return sum(pz[zi] * p[x] * m_true[zi] for zi, (x, _) in enumerate(support)), m_true
