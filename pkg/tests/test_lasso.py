import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedcox.errors import ConvergenceError, InvalidArgument, UnboundedProblemError
from fedcox.lasso import (
    GelCorrection,
    SolverOptions,
    cox_objective,
    cv_lambda,
    fit_l1_cox,
    fit_l1_quadratic,
    fit_l1_smooth,
    kkt_residual,
    lambda_max,
    lambda_path,
    quadratic_objective,
    safe_lambda,
    select_lambda,
    soft_threshold,
    theory_lambda,
    unbounded_threshold,
)
from fedcox.survival import HessianOperator, gradient, hessian, neg_log_partial_likelihood

from conftest import make_data


def enumerate_quadratic(H, c, lam):
    """Exact lasso-QP minimizer by trying every sign pattern (p <= 4)."""
    p = c.size
    best, best_obj = None, np.inf
    for s in itertools.product((-1, 0, 1), repeat=p):
        s = np.array(s, dtype=float)
        A = np.flatnonzero(s)
        w = np.zeros(p)
        if A.size:
            try:
                w[A] = np.linalg.solve(2 * H[np.ix_(A, A)], 2 * c[A] - lam * s[A])
            except np.linalg.LinAlgError:
                continue
            if np.any(np.sign(w[A]) != s[A]):
                continue
        if kkt_residual(2 * (H @ w - c), w, lam) < 1e-9:
            obj = quadratic_objective(H, c, w, lam)
            if obj < best_obj:
                best, best_obj = w, obj
    return best


def test_soft_threshold_and_kkt():
    assert np.allclose(soft_threshold(np.array([-3.0, -0.5, 0.0, 2.0]), 1.0), [-2.0, 0.0, 0.0, 1.0])
    assert kkt_residual(np.array([0.5, -1.0]), np.array([0.0, 2.0]), 1.0) == 0.0
    assert kkt_residual(np.array([1.5, 0.0]), np.array([0.0, 0.0]), 1.0) == pytest.approx(0.5)


@given(st.integers(0, 10**6), st.integers(1, 4), st.floats(0.01, 2.0))
def test_quadratic_matches_sign_enumeration(seed, p, lam):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((p + 2, p))
    H = A.T @ A / (p + 2) + 0.05 * np.eye(p)
    c = rng.standard_normal(p)
    fit = fit_l1_quadratic(H, c, lam)
    oracle = enumerate_quadratic(H, c, lam)
    assert np.allclose(fit.beta, oracle, atol=1e-7)
    assert fit.diagnostics.kkt_residual <= 1e-7


def test_quadratic_operator_path_equals_dense():
    data = make_data(60, 8, 4)
    beta = np.full(8, 0.1)
    H = hessian(data, beta)
    c = np.linspace(-0.2, 0.3, 8)
    dense = fit_l1_quadratic(H, c, 0.02).beta
    op = fit_l1_quadratic(HessianOperator(data, beta), c, 0.02).beta
    assert np.allclose(dense, op, atol=1e-7)


@given(st.integers(0, 10**6))
def test_cox_fit_matches_proximal_gradient_oracle(seed):
    data = make_data(50, 6, seed)
    lam = 0.3 * lambda_max(data)
    fit = fit_l1_cox(data, lam)
    ref = fit_l1_smooth(lambda b: neg_log_partial_likelihood(data, b), lambda b: gradient(data, b), data.p, lam)
    assert fit.diagnostics.kkt_residual <= 1e-7
    assert cox_objective(data, fit.beta, lam) <= cox_objective(data, ref.beta, lam) + 1e-10
    assert np.allclose(fit.beta, ref.beta, atol=1e-5)


def test_gel_correction_matches_shifted_oracle():
    data = make_data(60, 5, 11)
    shift = np.array([0.05, -0.02, 0.0, 0.03, 0.01])
    corr = GelCorrection(shift, np.zeros(5))
    lam = 0.02
    fit = fit_l1_cox(data, lam, corr)
    ref = fit_l1_smooth(lambda b: neg_log_partial_likelihood(data, b) - shift @ b,
                        lambda b: gradient(data, b) - shift, 5, lam)
    assert np.allclose(fit.beta, ref.beta, atol=1e-5)
    assert kkt_residual(gradient(data, fit.beta) - shift, fit.beta, lam) <= 1e-7


def test_zero_correction_is_the_plain_lasso():
    data = make_data(60, 5, 12)
    lam = 0.03
    plain = fit_l1_cox(data, lam).beta
    corr = GelCorrection.from_gradients(gradient(data, plain), gradient(data, plain), plain)
    assert np.all(corr.shift == 0)
    assert np.array_equal(fit_l1_cox(data, lam, corr).beta, plain)


def test_lambda_max_gives_zero_fit():
    data = make_data(60, 5, 13)
    lm = lambda_max(data)
    assert np.all(fit_l1_cox(data, lm * 1.0001).beta == 0)
    assert np.any(fit_l1_cox(data, lm * 0.8).beta != 0)


def test_high_dimensional_fit_certifies():
    data = make_data(60, 150, 14, scale=0.1)
    fit = fit_l1_cox(data, 0.05)
    assert fit.diagnostics.kkt_residual <= 1e-7
    assert fit.diagnostics.support_size < 60


def test_convergence_error_carries_iterate():
    data = make_data(80, 10, 15)
    with pytest.raises(ConvergenceError) as info:
        fit_l1_cox(data, 1e-4, opts=SolverOptions(max_outer=1, wls_rounds=1))
    assert info.value.beta is not None and info.value.beta.shape == (10,)


def test_unbounded_quadratic_detected():
    H = np.diag([1.0, 0.0])
    with pytest.raises(UnboundedProblemError):
        fit_l1_quadratic(H, np.array([0.0, 1.0]), 0.5)
    # bounded once lam >= 2 |c_2|
    w = fit_l1_quadratic(H, np.array([0.0, 1.0]), 2.5).beta
    assert w[1] == 0


def test_unbounded_threshold_brute_force():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((2, 4))
    H = A.T @ A
    c = rng.standard_normal(4)
    thr = unbounded_threshold(H, c)
    # along null directions v the objective is t (lam ||v||_1 - 2 c'v); on a
    # 2-d null space the ratio c'v / ||v||_1 peaks where some v_j vanishes
    _, vecs = np.linalg.eigh(H)
    N = vecs[:, :2]
    vs = np.array([N @ np.array([-N[j, 1], N[j, 0]]) for j in range(4)]).T
    brute = np.max(2 * np.abs(c @ vs) / np.abs(vs).sum(axis=0))
    assert thr == pytest.approx(brute, rel=1e-8)
    with pytest.raises(UnboundedProblemError):
        fit_l1_quadratic(H, c, 0.9 * thr)
    assert fit_l1_quadratic(H, c, safe_lambda(H, c, 0.9 * thr)).diagnostics.kkt_residual <= 1e-7
    assert unbounded_threshold(np.eye(3), np.ones(3)) == 0.0


def test_penalty_rules():
    assert theory_lambda(1.0, 2.0, 100, 400) == pytest.approx(2.0 * np.sqrt(np.log(100) / 400))
    with pytest.raises(InvalidArgument):
        theory_lambda(0.0, 1.0, 10, 10)
    path = lambda_path(1.0, 5, 0.01)
    assert path[0] == 1.0 and path[-1] == pytest.approx(0.01) and np.all(np.diff(path) < 0)
    data = make_data(80, 6, 16)
    lam, path, dev = cv_lambda(data, folds=4, n_lambdas=8, return_path=True)
    assert lam in path and dev.shape == path.shape
    assert select_lambda(data, "theory_scale", c0=0.5) > 0
    with pytest.raises(InvalidArgument):
        select_lambda((np.eye(2), np.ones(2)), "theory_scale")


def test_invalid_lambda():
    with pytest.raises(InvalidArgument):
        fit_l1_cox(make_data(), 0.0)
    with pytest.raises(InvalidArgument):
        fit_l1_quadratic(np.eye(2), np.ones(2), -1.0)
