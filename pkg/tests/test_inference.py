import math

import numpy as np
import pytest
from scipy import stats

from fedcox.errors import InvalidArgument
from fedcox.federation import gel_iterate, partition
from fedcox.inference import (
    REPORT_FIELDS,
    confidence_interval,
    coordinate_test,
    debiased_linear_functional,
    decorrelated_score,
    estimate_omega_k,
    estimate_w_k,
    infer_linear,
    local_linear_report,
    local_score_report,
    normal_quantile,
    score_test,
    sigma_nu_hat,
    trace_pair,
    two_sided_p,
    variance_linear,
)
from fedcox.lasso import fit_l1_cox, kkt_residual
from fedcox.survival import gradient, hessian

from conftest import make_data


def test_scalar_helpers_against_scipy():
    assert normal_quantile(0.975) == pytest.approx(stats.norm.ppf(0.975), rel=1e-14)
    assert two_sided_p(1.3) == pytest.approx(2 * stats.norm.sf(1.3), rel=1e-13)
    lo, hi = confidence_interval(1.0, 4.0, 100, 0.05)
    assert (hi - lo) / 2 == pytest.approx(stats.norm.ppf(0.975) * 0.2, rel=1e-14)
    z, p, rej = score_test(0.3, 1.5, 100, 0.05)
    assert z == pytest.approx(2.0) and p == pytest.approx(2 * stats.norm.sf(2.0)) and rej
    with pytest.raises(InvalidArgument):
        confidence_interval(0.0, -1.0, 10)
    with pytest.raises(InvalidArgument):
        score_test(0.1, 1.0, 10, alpha=1.5)
    with pytest.raises(InvalidArgument):
        score_test(0.1, 0.0, 10)


@pytest.fixture(scope="module")
def fitted(sim_cohort_data):
    co = partition(sim_cohort_data, 4, seed=0)
    tr = gel_iterate(co, T=4)
    yield co, tr
    co.close()


def test_driver_matches_building_blocks(fitted):
    co, tr = fitted
    bt, bh, gbar = trace_pair(tr)
    c = np.zeros(co.p)
    c[0], c[2] = 1.0, -0.5
    lam = 0.4
    rep = infer_linear(co, bt, bh, c, lam=lam, global_grad_tilde=gbar)
    omegas = [estimate_omega_k(center, bh, c, lam) for center in co.centers]
    assert debiased_linear_functional(co, bt, bh, omegas, c) == pytest.approx(rep.estimate, abs=1e-12)
    assert variance_linear(co, omegas, bh, c) == pytest.approx(rep.variance, abs=1e-12)
    assert rep.ci_low < rep.estimate < rep.ci_high


def test_score_driver_matches_building_blocks(fitted):
    co, tr = fitted
    bt, bh, gbar = trace_pair(tr)
    lam, coord = 0.1, 1
    rep = coordinate_test(co, bt, bh, coord, lam=lam, global_grad_tilde=gbar)
    ws = [estimate_w_k(center, bh, lam, coord) for center in co.centers]
    gamma = np.delete(bh, coord)
    pi = decorrelated_score(co, gamma, bt, ws, coord)
    var = sigma_nu_hat(co, bh, ws, coord)
    assert pi == pytest.approx(rep.estimate, abs=1e-12)
    assert var == pytest.approx(rep.variance, abs=1e-12)
    z = math.sqrt(co.n) * pi / math.sqrt(var)
    assert rep.statistic == pytest.approx(z, rel=1e-12)


def test_omega_and_w_certified(fitted):
    co, tr = fitted
    bh = tr.final
    H = hessian(co.principal_data, bh)
    c = np.eye(co.p)[0]
    om = estimate_omega_k(co.centers[0], bh, c, 0.3)
    assert kkt_residual(2 * (H @ om - c), om, 0.3) <= 1e-7
    w = estimate_w_k(co.centers[0], bh, 0.05, coord=0)
    keep = np.arange(1, co.p)
    assert kkt_residual(2 * (H[np.ix_(keep, keep)] @ w - H[keep, 0]), w, 0.05) <= 1e-7
    assert np.array_equal(estimate_w_k(co.centers[0], bh, 0.05, 0, H=H), w)


def test_single_center_reduces_to_local_debiased_lasso(sim_cohort_data):
    with partition(sim_cohort_data, 1) as co:
        tr = gel_iterate(co, T=2)
        bt, bh, gbar = trace_pair(tr)
        c = np.eye(co.p)[3]
        dist = infer_linear(co, bt, bh, c, lam=0.2, global_grad_tilde=gbar)
        local = local_linear_report(co.principal_data, bh, c, 0.2)
        assert abs(dist.estimate - local.estimate) <= 1e-10
        assert abs(dist.variance - local.variance) <= 1e-10
        t_dist = coordinate_test(co, bt, bh, 3, lam=0.1, global_grad_tilde=gbar)
        t_local = local_score_report(co.principal_data, bh, 3, 0.1)
        assert abs(t_dist.statistic - t_local.statistic) <= 1e-10


def test_small_penalty_recovers_one_step_newton():
    # low dimension, tiny penalty: omega -> H^{-1} c and the estimate is a Newton step
    data = make_data(300, 3, 8)
    bh = fit_l1_cox(data, 0.01).beta
    c = np.array([1.0, -1.0, 0.5])
    rep = local_linear_report(data, bh, c, 1e-9)
    H = hessian(data, bh)
    step = np.linalg.solve(H, gradient(data, bh))
    assert rep.estimate == pytest.approx(c @ (bh - step), abs=1e-6)
    assert rep.variance == pytest.approx(c @ np.linalg.solve(H, c), rel=1e-6)


def test_inference_comm_is_one_small_round(fitted):
    co, tr = fitted
    bt, bh, gbar = trace_pair(tr)
    before = co.comm_log.snapshot()
    rep = infer_linear(co, bt, bh, np.eye(co.p)[0], global_grad_tilde=gbar)
    after = co.comm_log.snapshot()
    assert after["floats"]["down"] - before["floats"]["down"] == 4 + 5 * co.p
    assert after["floats"]["up"] - before["floats"]["up"] == 3 * co.K
    assert rep.comm_floats == 4 + 5 * co.p + 3 * co.K


def test_report_serialisation(fitted):
    co, tr = fitted
    bt, bh, gbar = trace_pair(tr)
    rep = coordinate_test(co, bt, bh, 0, global_grad_tilde=gbar)
    d = rep.to_dict()
    assert tuple(d) == REPORT_FIELDS
    assert rep.to_csv_row(header=True).splitlines()[0] == ",".join(REPORT_FIELDS)
    assert '"reject"' in rep.to_json()


def test_input_validation(fitted):
    co, tr = fitted
    bt, bh, gbar = trace_pair(tr)
    with pytest.raises(InvalidArgument):
        infer_linear(co, bt, bh, np.zeros(co.p))
    with pytest.raises(InvalidArgument):
        coordinate_test(co, bt, bh, co.p)
    with pytest.raises(InvalidArgument):
        debiased_linear_functional(co, bt, bh, [np.zeros(co.p)], np.ones(co.p))
