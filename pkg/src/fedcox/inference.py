"""Debiased inference for linear functionals and the decorrelated score test.

Two layers are provided.  The building blocks (``estimate_omega_k``,
``debiased_linear_functional``, ``variance_linear``, ``estimate_w_k``,
``decorrelated_score``, ``sigma_nu_hat``) mirror the estimators term by
term and take the local solutions as inputs.  The drivers
(``infer_linear``, ``coordinate_test``) run the whole procedure as one
protocol round in which every center solves its own program and replies
with a handful of scalars.

Both layers pair two consecutive GEL iterates: ``beta_tilde`` (the point
where the last averaged gradient was taken) and ``beta_hat`` (the estimate
solved from it).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import DegenerateVarianceError, InvalidArgument
from .federation.center import _quad, score_terms, solve_omega, solve_w
from .federation.cohort import FederatedCohort, GelTrace, gradient_round
from .federation.protocol import Message
from .lasso import SolverOptions
from .survival import SurvivalDataset
from .tuning import Tuning

REPORT_FIELDS = ("target", "estimate", "var", "ci_low", "ci_high", "z", "p", "reject", "n", "p_dim", "K", "comm_floats")


@dataclass
class InferenceReport:
    target: str
    estimate: float
    variance: float
    ci_low: float
    ci_high: float
    statistic: float
    p_value: float
    reject: bool
    alpha: float
    n: int
    K: int
    p: int
    comm_floats: int = 0

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "estimate": self.estimate,
            "var": self.variance,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "z": self.statistic,
            "p": self.p_value,
            "reject": bool(self.reject),
            "n": self.n,
            "p_dim": self.p,
            "K": self.K,
            "comm_floats": self.comm_floats,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def to_csv_row(self, header: bool = False) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
        if header:
            w.writeheader()
        w.writerow(self.to_dict())
        return buf.getvalue()


# ---------------------------------------------------------------------------
# scalar pieces

def normal_quantile(q: float) -> float:
    return float(ndtri(q))


def _check_alpha(alpha):
    if not 0 < alpha < 1:
        raise InvalidArgument("alpha must lie in (0, 1)")


def confidence_interval(estimate: float, variance: float, n: int, alpha: float = 0.05):
    """``estimate -/+ z_{1 - alpha/2} sqrt(variance / n)``."""
    _check_alpha(alpha)
    if variance < 0:
        raise InvalidArgument(f"variance must be nonnegative, got {variance}")
    half = normal_quantile(1.0 - alpha / 2.0) * math.sqrt(variance / n)
    return estimate - half, estimate + half


def two_sided_p(z: float) -> float:
    return float(min(1.0, 2.0 * ndtr(-abs(z))))


def score_test(pi_bar: float, sigma_nu: float, n: int, alpha: float = 0.05):
    """``z = sqrt(n) pi_bar / sigma_nu``, two-sided p-value and ``p < alpha``.

    ``sigma_nu`` is a standard deviation (the square root of ``sigma_nu_hat``).
    """
    _check_alpha(alpha)
    if not sigma_nu > 0:
        raise InvalidArgument("sigma_nu must be positive")
    z = math.sqrt(n) * pi_bar / sigma_nu
    p = two_sided_p(z)
    return z, p, p < alpha


# ---------------------------------------------------------------------------
# building blocks

def _data(center) -> SurvivalDataset:
    return center if isinstance(center, SurvivalDataset) else center.data


def estimate_omega_k(center, beta_hat, c, lam: float, opts: SolverOptions | None = None, H=None) -> np.ndarray:
    """Debiasing direction of one center (``H`` may be injected)."""
    c = np.asarray(c, dtype=np.float64)
    if H is not None:
        from .lasso import fit_l1_quadratic

        return fit_l1_quadratic(H, c, lam, opts).beta
    return solve_omega(_data(center), beta_hat, c, lam, opts)[0]


def estimate_w_k(center, beta_hat, lam: float, coord: int = 0, opts: SolverOptions | None = None, H=None) -> np.ndarray:
    """Decorrelation vector of one center for coordinate ``coord``."""
    if H is not None:
        from .lasso import fit_l1_quadratic

        p = H.shape[0]
        keep = np.delete(np.arange(p), coord)
        return fit_l1_quadratic(H[np.ix_(keep, keep)], H[keep, coord], lam, opts).beta
    return solve_w(_data(center), beta_hat, coord, lam, opts)[0]


def _check_vectors(cohort, vectors, size, what):
    if len(vectors) != cohort.K:
        raise InvalidArgument(f"expected {cohort.K} {what}, got {len(vectors)}")
    for v in vectors:
        if np.asarray(v).shape != (size,):
            raise InvalidArgument(f"{what} must have length {size}")


def debiased_linear_functional(cohort: FederatedCohort, beta_tilde, beta_hat, omegas, c) -> float:
    """``c' beta_hat + (1/K) sum_k omega_k' {g_k(bt) - g_k(bh) - gbar(bt)}``.

    One batched gradient round at ``(beta_tilde, beta_hat)``.
    """
    p = cohort.p
    c = np.asarray(c, dtype=np.float64)
    _check_vectors(cohort, omegas, p, "omegas")
    for v in (beta_tilde, beta_hat, c):
        if np.asarray(v).shape != (p,):
            raise InvalidArgument(f"vectors must have length {p}")
    G = gradient_round(cohort, beta_tilde, beta_hat)
    g_bar = G[:, 0, :].mean(axis=0)
    corr = [np.asarray(w) @ (G[k, 0] - G[k, 1] - g_bar) for k, w in enumerate(omegas)]
    return float(c @ np.asarray(beta_hat) + np.mean(corr))


def _quadratic_forms(cohort: FederatedCohort, beta_hat, vectors, c):
    """Each center returns ``[c' v_k, v_k' H_k(beta_hat) v_k]``."""
    p = cohort.p
    zeros = np.zeros(p)
    reqs = [
        Message("omega_request", arrays=[np.array([2.0, 0.0, 0.0, 0.0]), beta_hat, c, zeros, zeros, v])
        for v in vectors
    ]
    cohort._round += 1
    for r in reqs:
        r.round = cohort._round
    replies = cohort.transport.exchange(reqs)
    return np.array([r.arrays[0] for r in replies])


def variance_linear(cohort: FederatedCohort, omegas, beta_hat, c) -> float:
    """``(1/K) sum_k {2 c' omega_k - omega_k' H_k(beta_hat) omega_k}``."""
    c = np.asarray(c, dtype=np.float64)
    _check_vectors(cohort, omegas, cohort.p, "omegas")
    s = _quadratic_forms(cohort, beta_hat, omegas, c)
    var = float(np.mean(2.0 * s[:, 0] - s[:, 1]))
    if var < 0:
        raise DegenerateVarianceError(f"variance estimate is negative ({var:.3g})", var)
    return var


def _embed(w, coord, p):
    v = np.zeros(p)
    v[coord] = 1.0
    v[np.delete(np.arange(p), coord)] = -np.asarray(w)
    return v


def null_point(beta_hat, coord: int = 0) -> np.ndarray:
    b = np.array(beta_hat, dtype=np.float64)
    b[coord] = 0.0
    return b


def decorrelated_score(cohort: FederatedCohort, gamma_hat, beta_tilde, ws, coord: int = 0) -> float:
    """``(1/K) sum_k {d_nu Lt_k(0, gamma) - w_k' d_gamma Lt_k(0, gamma)}``.

    ``Lt_k`` is the local loss shifted by ``{g_k(beta_tilde) - gbar(beta_tilde)}``.
    One batched gradient round at ``(beta_tilde, (0, gamma_hat))``.
    """
    p = cohort.p
    gamma_hat = np.asarray(gamma_hat, dtype=np.float64)
    if gamma_hat.shape != (p - 1,):
        raise InvalidArgument(f"gamma_hat must have length {p - 1}")
    _check_vectors(cohort, ws, p - 1, "w vectors")
    point = np.insert(gamma_hat, coord, 0.0)
    G = gradient_round(cohort, beta_tilde, point)
    g_bar = G[:, 0, :].mean(axis=0)
    keep = np.delete(np.arange(p), coord)
    vals = []
    for k, w in enumerate(ws):
        gt = G[k, 1] - (G[k, 0] - g_bar)
        vals.append(gt[coord] - np.asarray(w) @ gt[keep])
    return float(np.mean(vals))


def sigma_nu_hat(cohort: FederatedCohort, beta_hat, ws, coord: int = 0) -> float:
    """Variance of the decorrelated score, ``(1/K) sum_k v_k' H_k v_k`` with ``v_k = e_nu - (0, w_k)``."""
    p = cohort.p
    _check_vectors(cohort, ws, p - 1, "w vectors")
    vs = [_embed(w, coord, p) for w in ws]
    s = _quadratic_forms(cohort, beta_hat, vs, np.zeros(p))
    var = float(np.mean(s[:, 1]))
    if not var > 0:
        raise DegenerateVarianceError(f"score variance estimate is not positive ({var:.3g})", var)
    return var


# ---------------------------------------------------------------------------
# protocol drivers

def _bound(cohort):
    return float(np.abs(cohort.principal_data.covariates).max()) or 1.0


def _global_tilde(cohort, beta_tilde, global_grad_tilde):
    if global_grad_tilde is not None:
        return np.asarray(global_grad_tilde, dtype=np.float64)
    return gradient_round(cohort, beta_tilde)[:, 0, :].mean(axis=0)


def infer_linear(
    cohort: FederatedCohort,
    beta_tilde,
    beta_hat,
    c,
    alpha: float = 0.05,
    lam: float | None = None,
    global_grad_tilde=None,
    tuning: Tuning | None = None,
    target: str = "c'beta",
) -> InferenceReport:
    """Debiased estimate, variance and CI of ``c' beta`` in one round.

    If ``global_grad_tilde`` (the averaged gradient at ``beta_tilde``) is not
    supplied an extra gradient round computes it.
    """
    _check_alpha(alpha)
    c = np.asarray(c, dtype=np.float64)
    if not np.any(c):
        raise InvalidArgument("the loading vector c must be nonzero")
    tuning = tuning or Tuning()
    lam = tuning.omega(cohort.p, cohort.m, _bound(cohort)) if lam is None else lam
    before = cohort.comm_log.total_floats
    g_bar = _global_tilde(cohort, beta_tilde, global_grad_tilde)
    params = np.array([0.0, lam, 0.0, 0.0])
    replies = cohort.broadcast(
        Message("omega_request", arrays=[params, beta_hat, c, beta_tilde, g_bar, np.zeros(cohort.p)])
    )
    s = np.array([r.arrays[0] for r in replies])
    estimate = float(c @ np.asarray(beta_hat) + s[:, 0].mean())
    var = float(np.mean(2.0 * s[:, 1] - s[:, 2]))
    if var < 0:
        raise DegenerateVarianceError(f"variance estimate is negative ({var:.3g})", var)
    return _linear_report(target, estimate, var, alpha, cohort.n, cohort.K, cohort.p,
                          cohort.comm_log.total_floats - before)


def _linear_report(target, estimate, var, alpha, n, K, p, comm):
    lo, hi = confidence_interval(estimate, var, n, alpha)
    z = estimate / math.sqrt(var / n) if var > 0 else (0.0 if estimate == 0 else math.copysign(math.inf, estimate))
    pv = two_sided_p(z)
    return InferenceReport(target, estimate, var, lo, hi, z, pv, pv < alpha, alpha, n, K, p, comm)


def coordinate_test(
    cohort: FederatedCohort,
    beta_tilde,
    beta_hat,
    coord: int = 0,
    alpha: float = 0.05,
    lam: float | None = None,
    global_grad_tilde=None,
    tuning: Tuning | None = None,
) -> InferenceReport:
    """Decorrelated score test of ``beta[coord] = 0`` in one round."""
    _check_alpha(alpha)
    p = cohort.p
    if not 0 <= coord < p:
        raise InvalidArgument(f"coordinate {coord} out of range for p={p}")
    tuning = tuning or Tuning()
    lam = tuning.w(p, cohort.m, _bound(cohort)) if lam is None else lam
    before = cohort.comm_log.total_floats
    g_bar = _global_tilde(cohort, beta_tilde, global_grad_tilde)
    point = null_point(beta_hat, coord)
    params = np.array([1.0, lam, float(coord), 0.0])
    replies = cohort.broadcast(
        Message("omega_request", arrays=[params, beta_hat, np.zeros(p), beta_tilde, g_bar, point])
    )
    s = np.array([r.arrays[0] for r in replies])
    pi_bar = float(s[:, 0].mean())
    var = float(s[:, 1].mean())
    if not var > 0:
        raise DegenerateVarianceError(f"score variance estimate is not positive ({var:.3g})", var)
    z, pv, rej = score_test(pi_bar, math.sqrt(var), cohort.n, alpha)
    lo, hi = confidence_interval(pi_bar, var, cohort.n, alpha)
    return InferenceReport(f"beta[{coord}]=0", pi_bar, var, lo, hi, z, pv, rej, alpha, cohort.n, cohort.K, p,
                           cohort.comm_log.total_floats - before)


def trace_pair(trace: GelTrace):
    """``(beta_tilde, beta_hat, gbar(beta_tilde))`` from the last GEL round."""
    if trace.T < 1 or not trace.global_grads:
        raise InvalidArgument("inference needs a trace with at least one GEL round")
    return trace.iterates[-2], trace.iterates[-1], trace.global_grads[len(trace.iterates) - 2]


# ---------------------------------------------------------------------------
# single-sample and averaged baselines (no transport)

def local_linear_report(data: SurvivalDataset, beta_hat, c, lam: float, alpha: float = 0.05,
                        opts=None, target: str = "c'beta") -> InferenceReport:
    """Single-sample debiased inference: the K = 1 case of ``infer_linear``."""
    from .survival import gradient

    c = np.asarray(c, dtype=np.float64)
    omega, H = solve_omega(data, beta_hat, c, lam, opts)
    estimate = float(c @ beta_hat - omega @ gradient(data, beta_hat))
    var = float(2.0 * c @ omega - _quad(H, omega))
    if var < 0:
        raise DegenerateVarianceError(f"variance estimate is negative ({var:.3g})", var)
    return _linear_report(target, estimate, var, alpha, data.n, 1, data.p, 0)


def local_score_report(data: SurvivalDataset, beta_hat, coord: int, lam: float, alpha: float = 0.05,
                       opts=None) -> InferenceReport:
    """Single-sample decorrelated score test (the K = 1 case of ``coordinate_test``)."""
    from .survival import gradient

    w, H = solve_w(data, beta_hat, coord, lam, opts)
    pi, var = score_terms(H, w, coord, gradient(data, null_point(beta_hat, coord)))
    if not var > 0:
        raise DegenerateVarianceError(f"score variance estimate is not positive ({var:.3g})", var)
    z, pv, rej = score_test(pi, math.sqrt(var), data.n, alpha)
    lo, hi = confidence_interval(pi, var, data.n, alpha)
    return InferenceReport(f"beta[{coord}]=0", pi, var, lo, hi, z, pv, rej, alpha, data.n, 1, data.p)


def averaged_debiased_report(cohort: FederatedCohort, local_fits, c, lam: float, alpha: float = 0.05,
                             opts=None, target: str = "c'beta") -> InferenceReport:
    """Wald inference from the average of local debiased estimates.

    Estimate ``(1/K) sum_k {c' b_k - omega_k' g_k(b_k)}`` and variance
    ``(1/K) sum_k {2 c' omega_k - omega_k' H_k omega_k}`` with every piece at
    the center's own lasso ``b_k``.
    """
    from .survival import gradient

    c = np.asarray(c, dtype=np.float64)
    ests, vars_ = [], []
    for center, b in zip(cohort.centers, local_fits):
        omega, H = solve_omega(center.data, b, c, lam, opts)
        ests.append(c @ b - omega @ gradient(center.data, b))
        vars_.append(2.0 * c @ omega - _quad(H, omega))
    var = float(np.mean(vars_))
    if var < 0:
        raise DegenerateVarianceError(f"variance estimate is negative ({var:.3g})", var)
    return _linear_report(target, float(np.mean(ests)), var, alpha, cohort.n, cohort.K, cohort.p, 0)
