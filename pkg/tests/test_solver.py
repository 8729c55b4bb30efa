import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import OBJECTIVES, bounded_instance, grid_minimum, random_problem
from madml import solver as S
from madml._backend import load_kernel
from madml.exceptions import DegenerateProblemError, DivergenceError

LOSSES = S.LOSS_KINDS


@pytest.mark.parametrize("loss", LOSSES)
def test_grid_oracle_two_dims(loss):
    rng = np.random.default_rng(hash(loss) % 2**32)
    for _ in range(5):
        prob = random_problem(rng, loss)
        res = S.solve(prob)
        assert res.converged and res.kkt_residual <= 1e-7
        best, _ = grid_minimum(lambda G: OBJECTIVES[loss](prob, G), d=2)
        assert res.objective <= best + 1e-5


def test_intercept_only_closed_form():
    rng = np.random.default_rng(7)
    n = 40
    D = (rng.uniform(size=n) < 0.7).astype(float)
    w = rng.uniform(0.5, 1.5, n)
    A, Bv = np.mean(w * D), np.mean(w * (1 - D))
    assert A > Bv
    for lam in (0.0, 0.3 * (A - Bv), 0.9 * (A - Bv)):
        res = S.fit_calibrated_logistic_treated(w, D, np.ones((n, 1)), lam)
        assert math.isclose(res.coef[0], math.log(A / (Bv + lam)), abs_tol=1e-7)
    # at or beyond A - Bv zero is optimal
    res = S.fit_calibrated_logistic_treated(w, D, np.ones((n, 1)), 1.01 * (A - Bv))
    assert res.coef[0] == 0.0


def test_control_relabel_symmetry():
    rng = np.random.default_rng(8)
    for _ in range(10):
        w, D, Z = bounded_instance(rng, 30, 4, outer_arm=0)
        lam = 0.05
        ctrl = S.fit_calibrated_logistic_control(w, D, Z, lam, S.SolverConfig(tol=1e-10))
        # control loss at (D, Z) is the treated loss at (1-D, -Z) with the same coefficient,
        # equivalently the negated treated coefficient at (1-D, Z)
        mirrored = S.fit_calibrated_logistic_treated(w, 1 - D, -Z, lam, S.SolverConfig(tol=1e-10))
        flipped = S.fit_calibrated_logistic_treated(w, 1 - D, Z, lam, S.SolverConfig(tol=1e-10))
        np.testing.assert_allclose(ctrl.coef, mirrored.coef, atol=1e-7)
        np.testing.assert_allclose(ctrl.coef, -flipped.coef, atol=1e-7)


@pytest.mark.parametrize("loss", LOSSES)
def test_zero_threshold(loss):
    rng = np.random.default_rng(9)
    prob = random_problem(rng, loss, n=40, d=5)
    thr = S.zero_threshold(prob)
    prob.lam = thr + 1e-9
    res = S.solve(prob)
    assert np.all(res.coef == 0) and S.kkt_residual(prob, res.coef) == 0.0
    prob.lam = thr - 1e-9
    assert S.kkt_residual(prob, np.zeros(5)) == pytest.approx(1e-9, rel=1e-3)
    res = S.solve(prob, S.SolverConfig(tol=1e-12))
    assert np.any(res.coef != 0)


def test_weighted_lasso_normal_equations():
    rng = np.random.default_rng(10)
    n, d = 200, 6
    Z = np.column_stack([np.ones(n), rng.standard_normal((n, d - 1))])
    Y = Z @ rng.normal(size=d) + rng.normal(size=n)
    w, v = rng.uniform(0.5, 2, n), rng.uniform(0.1, 3, n)
    res = S.fit_weighted_lasso(w, v, Z, Y, 0.0, S.SolverConfig(tol=1e-12))
    W = w * v
    want = np.linalg.solve(Z.T @ (W[:, None] * Z), Z.T @ (W * Y))
    np.testing.assert_allclose(res.coef, want, atol=1e-8)


@given(st.floats(0.0, 2.0), st.integers(0, 2**31))
def test_one_dimensional_lasso(lam, seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=30)
    y = 1.3 * z + rng.normal(size=30)
    ezy, ez2 = np.mean(z * y), np.mean(z * z)
    want = math.copysign(max(abs(ezy) - lam, 0.0), ezy) / ez2
    res = S.fit_weighted_lasso(np.ones(30), np.ones(30), z[:, None], y, lam, S.SolverConfig(tol=1e-12))
    assert res.coef[0] == pytest.approx(want, abs=1e-10)


def test_kkt_residual_grows_away_from_minimizer():
    rng = np.random.default_rng(11)
    z = rng.normal(size=50)
    y = 2 * z + rng.normal(size=50)
    prob = S.PenalizedProblem("weighted_squares", np.ones(50), z[:, None], outcome=y, lam=0.3)
    res = S.solve(prob, S.SolverConfig(tol=1e-12))
    assert S.kkt_residual(prob, res.coef) <= 1e-12
    prev = 0.0
    for delta in np.linspace(0.01, 1.0, 25):
        r = S.kkt_residual(prob, res.coef + delta)
        assert r > prev
        prev = r


def test_kkt_definition():
    g = np.array([0.5, -0.2, 0.1, 0.3])
    coef = np.array([0.0, 0.0, 1.0, -2.0])
    lam = np.full(4, 0.25)
    # zero coords: max(|g|-lam, 0) = 0.25, 0; nonzero: |g + lam sign| = 0.35, 0.05
    assert S.kkt_from_gradient(g, coef, lam) == pytest.approx(0.35)


def test_bregman():
    w, D, Z = np.array([2.0]), np.array([1.0]), np.array([[1.0, 0.5]])
    a, b = np.array([0.2, 0.0]), np.array([0.0, 1.0])
    ia, ib = 0.2, 0.5
    want = 2.0 * (math.exp(-ia) - math.exp(-ib)) * (ib - ia)
    assert S.bregman_gamma(w, D, Z, a, b) == pytest.approx(want, rel=1e-14)
    assert S.bregman_alpha(w, np.array([3.0]), Z, a, b) == pytest.approx(2 * 3 * (ib - ia) ** 2, rel=1e-14)
    assert S.bregman_gamma(w, D, Z, a, a) == 0.0


@given(st.integers(0, 2**31))
def test_bregman_nonnegative(seed):
    rng = np.random.default_rng(seed)
    w, D, Z = bounded_instance(rng, 15, 3)
    a, b = rng.normal(size=3), rng.normal(size=3)
    assert S.bregman_gamma(w, D, Z, a, b) >= -1e-12
    assert S.bregman_alpha(w, rng.uniform(size=15), Z, a, b) >= -1e-12


def test_objective_monotone_history():
    rng = np.random.default_rng(12)
    for loss in LOSSES:
        prob = random_problem(rng, loss, n=60, d=8, lam_range=(0.05, 0.5))
        res = S.solve(prob)
        h = np.array(res.history)
        assert np.all(np.diff(h) <= 1e-12 * np.maximum(1.0, np.abs(h[:-1])))


def test_permutation_invariance_and_warm_start():
    rng = np.random.default_rng(13)
    prob = random_problem(rng, "calibrated_logistic_treated", n=60, d=6, lam_range=(0.1, 0.4))
    cfg = S.SolverConfig(tol=1e-10)
    base = S.solve(prob, cfg)
    perm = rng.permutation(60)
    permuted = S.PenalizedProblem(prob.loss_kind, prob.weights[perm], prob.covariates[perm],
                                  treatment=prob.treatment[perm], lam=prob.lam)
    np.testing.assert_allclose(S.solve(permuted, cfg).coef, base.coef, atol=1e-8)
    warm = S.solve(prob, cfg, x0=rng.normal(size=6) * 0.5)
    np.testing.assert_allclose(warm.coef, base.coef, atol=1e-8)


def test_divergence_surfaced():
    # every treated row has z > 0 and every control z < 0: the treated loss
    # decreases without bound along the z direction when lambda is small
    z = np.r_[np.linspace(0.5, 1.0, 5), np.linspace(-1.0, -0.5, 5)]
    D = np.r_[np.ones(5), np.zeros(5)]
    Z = np.column_stack([np.ones(10), z])
    with pytest.raises(DivergenceError):
        S.fit_calibrated_logistic_treated(np.ones(10), D, Z, 1e-4)


def test_degenerate_weights():
    with pytest.raises(DegenerateProblemError):
        S.fit_weighted_lasso(np.ones(4), np.zeros(4), np.ones((4, 1)), np.arange(4.0), 0.1)


def test_backends_agree():
    try:
        compiled = load_kernel("compiled")
    except ImportError:
        pytest.skip("compiled kernel not built")
    python = load_kernel("python")
    rng = np.random.default_rng(14)
    for loss in LOSSES:
        prob = random_problem(rng, loss, n=80, d=10, lam_range=(0.05, 0.6))
        a = S.solve(prob, kernel=python)
        b = S.solve(prob, kernel=compiled)
        np.testing.assert_allclose(a.coef, b.coef, atol=1e-12)
