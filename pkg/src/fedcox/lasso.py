"""L1-penalized solvers.

``fit_l1_cox`` minimizes

    L(beta) - shift' beta + lam * ||beta||_1

where ``L`` is a dataset's average negative log partial likelihood and
``shift`` is an optional linear correction (the gradient-enhanced loss used
at the principal center).  The outer loop forms a quadratic model of ``L``
using the diagonal of the Hessian in the linear predictor (penalized
weighted least squares); the inner loop is cyclic coordinate descent with
soft-thresholding.  A step-halving line search keeps the true objective
from increasing.

``fit_l1_quadratic`` minimizes ``w' H w - 2 c' w + lam * ||w||_1`` for a PSD
``H``, either dense or given as an operator exposing ``column`` and
``diagonal`` (so large-p problems never materialize ``H``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from numba import njit

from .errors import ConvergenceError, InvalidArgument, UnboundedProblemError
from .survival import SurvivalDataset, eta_derivatives, neg_log_partial_likelihood

LAMBDA_FLOOR = 1e-6


@dataclass(frozen=True)
class SolverOptions:
    max_outer: int = 100
    max_inner: int = 1000
    tol_kkt: float = 1e-7
    tol_obj: float = 1e-10
    active_set: bool = True
    # after this many outer rounds the diagonal model gives way to the full Hessian (p <= newton_max_p)
    wls_rounds: int = 5
    newton_max_p: int = 1000

    def __post_init__(self):
        if self.tol_kkt <= 0 or self.tol_obj <= 0:
            raise InvalidArgument("solver tolerances must be positive")
        if self.max_outer < 1 or self.max_inner < 1:
            raise InvalidArgument("iteration limits must be positive")


@dataclass(frozen=True)
class GelCorrection:
    """Linear correction ``grad L_1(anchor) - averaged gradient(anchor)``."""

    shift: np.ndarray
    anchor: np.ndarray

    @classmethod
    def from_gradients(cls, local_grad, global_grad, anchor) -> "GelCorrection":
        return cls(np.asarray(local_grad) - np.asarray(global_grad), np.asarray(anchor, dtype=np.float64).copy())


@dataclass
class FitDiagnostics:
    lambda_: float
    outer_iters: int
    kkt_residual: float
    objective: float
    support_size: int
    converged: bool = True
    history: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "lambda": self.lambda_,
            "outer_iters": self.outer_iters,
            "kkt_residual": self.kkt_residual,
            "objective": self.objective,
            "support_size": self.support_size,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


class FitResult(NamedTuple):
    beta: np.ndarray
    diagnostics: FitDiagnostics


def soft_threshold(z, t):
    return np.sign(z) * np.maximum(np.abs(z) - t, 0.0)


def kkt_residual(grad, beta, lam: float) -> float:
    """Largest violation of the lasso optimality conditions.

    ``|g_j| <= lam`` where ``beta_j == 0`` and ``g_j + lam sign(beta_j) == 0``
    elsewhere, with ``g`` the gradient of the smooth part.
    """
    grad = np.asarray(grad)
    beta = np.asarray(beta)
    zero = beta == 0
    r_zero = np.maximum(np.abs(grad[zero]) - lam, 0.0)
    r_act = np.abs(grad[~zero] + lam * np.sign(beta[~zero]))
    return float(max(r_zero.max(initial=0.0), r_act.max(initial=0.0)))


# ---------------------------------------------------------------------------
# numba kernels

@njit(cache=True)
def _soft(z, t):
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


@njit(cache=True)
def _cd_wls(XF, h, G, beta0, b, lam, ridge, tol, max_sweeps, use_active):
    # min_b G'(b - beta0) + 1/2 (b - beta0)' X' diag(h) X (b - beta0) + lam ||b||_1
    n, p = XF.shape
    u = np.zeros(n)
    d = np.empty(p)
    for j in range(p):
        s = 0.0
        dj = b[j] - beta0[j]
        for i in range(n):
            x = XF[i, j]
            s += h[i] * x * x
            if dj != 0.0:
                u[i] += x * dj
        d[j] = s + ridge
    active = np.zeros(p, dtype=np.bool_)
    sweeps = 0
    maxc = np.inf
    while sweeps < max_sweeps:
        maxc = 0.0
        for j in range(p):
            g = G[j] + ridge * (b[j] - beta0[j])
            for i in range(n):
                g += h[i] * XF[i, j] * u[i]
            new = _soft(d[j] * b[j] - g, lam) / d[j]
            delta = new - b[j]
            if delta != 0.0:
                for i in range(n):
                    u[i] += XF[i, j] * delta
                b[j] = new
                c = d[j] * abs(delta)
                if c > maxc:
                    maxc = c
            active[j] = b[j] != 0.0
        sweeps += 1
        if maxc < tol:
            break
        if not use_active:
            continue
        while sweeps < max_sweeps:
            maxa = 0.0
            for j in range(p):
                if not active[j]:
                    continue
                g = G[j] + ridge * (b[j] - beta0[j])
                for i in range(n):
                    g += h[i] * XF[i, j] * u[i]
                new = _soft(d[j] * b[j] - g, lam) / d[j]
                delta = new - b[j]
                if delta != 0.0:
                    for i in range(n):
                        u[i] += XF[i, j] * delta
                    b[j] = new
                    c = d[j] * abs(delta)
                    if c > maxa:
                        maxa = c
            sweeps += 1
            if maxa < tol:
                break
    return b, sweeps, maxc


@njit(cache=True)
def _cd_quad(H, c, w, lam, tol, max_sweeps, use_active, wmax):
    # min_w w'Hw - 2c'w + lam ||w||_1 ; returns (w, sweeps, maxchange, code)
    # code: -1 ok, j >= 0 zero-curvature coordinate, -2 iterates diverging
    p = c.shape[0]
    r = H @ w
    half = 0.5 * lam
    active = w != 0.0
    sweeps = 0
    maxc = np.inf
    while sweeps < max_sweeps:
        maxc = 0.0
        for j in range(p):
            hjj = H[j, j]
            z = c[j] - r[j] + hjj * w[j]
            if hjj <= 0.0:
                if abs(z) > half:
                    return w, sweeps, maxc, j
                continue
            new = _soft(z, half) / hjj
            if abs(new) > wmax:
                return w, sweeps, maxc, -2
            delta = new - w[j]
            if delta != 0.0:
                for k in range(p):
                    r[k] += H[j, k] * delta
                w[j] = new
                ch = 2.0 * hjj * abs(delta)
                if ch > maxc:
                    maxc = ch
            active[j] = w[j] != 0.0
        sweeps += 1
        if maxc < tol:
            break
        if not use_active:
            continue
        while sweeps < max_sweeps:
            maxa = 0.0
            for j in range(p):
                if not active[j]:
                    continue
                hjj = H[j, j]
                z = c[j] - r[j] + hjj * w[j]
                new = _soft(z, half) / hjj
                if abs(new) > wmax:
                    return w, sweeps, maxc, -2
                delta = new - w[j]
                if delta != 0.0:
                    for k in range(p):
                        r[k] += H[j, k] * delta
                    w[j] = new
                    ch = 2.0 * hjj * abs(delta)
                    if ch > maxa:
                        maxa = ch
            sweeps += 1
            if maxa < tol:
                break
    return w, sweeps, maxc, -1


# ---------------------------------------------------------------------------
# Cox lasso

def _xf(data: SurvivalDataset) -> np.ndarray:
    cache = data._cache
    if "XsF" not in cache:
        cache["XsF"] = np.asfortranarray(cache["Xs"])
    return cache["XsF"]


def fit_l1_cox(
    data: SurvivalDataset,
    lam: float,
    correction: GelCorrection | None = None,
    init=None,
    opts: SolverOptions | None = None,
) -> FitResult:
    """L1-penalized Cox fit, optionally with a gradient-enhanced correction.

    Raises
    ------
    ConvergenceError
        If the KKT certificate is not reached within ``opts.max_outer``
        outer iterations.  The exception carries the last iterate.
    """
    opts = opts or SolverOptions()
    if not lam > 0:
        raise InvalidArgument("lambda must be positive")
    if data.n_events == 0:
        raise InvalidArgument("cannot fit a Cox model on a dataset without events")
    p = data.p
    beta = np.zeros(p) if init is None else np.array(init, dtype=np.float64).ravel().copy()
    if beta.shape[0] != p:
        raise InvalidArgument(f"init has length {beta.shape[0]}, expected {p}")
    shift = np.zeros(p) if correction is None else np.asarray(correction.shift, dtype=np.float64)
    XF = _xf(data)
    Xs = data._cache["Xs"]

    def objective(loss, b):
        return loss - shift @ b + lam * np.abs(b).sum()

    loss, g_eta, h = eta_derivatives(data, beta)
    obj = objective(loss, beta)
    prev_obj = None
    history = []
    kkt = np.inf
    for it in range(opts.max_outer + 1):
        G = Xs.T @ g_eta - shift
        kkt = kkt_residual(G, beta, lam)
        history.append((obj, kkt))
        obj_ok = prev_obj is None or abs(prev_obj - obj) <= opts.tol_obj * max(1.0, abs(obj))
        if kkt <= opts.tol_kkt and obj_ok:
            diag = FitDiagnostics(lam, it, kkt, float(obj), int(np.count_nonzero(beta)), True, history)
            return FitResult(beta, diag)
        if it == opts.max_outer:
            break

        inner_tol = max(0.05 * opts.tol_kkt, min(0.01 * kkt, 1e-3))
        if it >= opts.wls_rounds and p <= opts.newton_max_p:
            b_new = _newton_model_step(data, beta, G, lam, inner_tol, opts)
        else:
            dmean = float(h @ (XF * XF).sum(axis=1)) / p
            ridge = 1e-10 * max(dmean, 1e-12)
            b_new, _, _ = _cd_wls(XF, h, G, beta, beta.copy(), lam, ridge, inner_tol, opts.max_inner, opts.active_set)
        d = b_new - beta

        step = 1.0
        while True:
            cand = beta + step * d
            loss_c, g_c, h_c = eta_derivatives(data, cand)
            obj_c = objective(loss_c, cand)
            if obj_c <= obj + 1e-12 * max(1.0, abs(obj)) or step < 1e-8:
                break
            step *= 0.5
        if obj_c > obj + 1e-10 * max(1.0, abs(obj)):
            # no descent along the model direction; stop with the certificate we have
            break
        prev_obj = obj
        beta, loss, g_eta, h, obj = cand, loss_c, g_c, h_c, obj_c

    diag = FitDiagnostics(lam, opts.max_outer, kkt, float(obj), int(np.count_nonzero(beta)), False, history)
    raise ConvergenceError(
        f"Cox lasso did not converge (KKT residual {kkt:.3g} > {opts.tol_kkt:.3g})",
        beta=beta,
        kkt_residual=kkt,
        diagnostics=diag,
    )


def _newton_model_step(data, beta, G, lam, tol, opts):
    # min_b G'(b - beta) + 1/2 (b - beta)' H (b - beta) + lam ||b||_1, i.e.
    # b'Hb - 2 (H beta - G)' b + 2 lam ||b||_1 up to a constant
    from .survival import hessian

    H = hessian(data, beta)
    H[np.diag_indices_from(H)] += 1e-10 * max(float(np.mean(np.diag(H))), 1e-12)
    c = H @ beta - G
    b, _, _, code = _cd_quad(H, c, beta.copy(), 2.0 * lam, 2.0 * tol, opts.max_inner, opts.active_set, np.inf)
    return b


def cox_objective(data: SurvivalDataset, beta, lam: float, shift=None) -> float:
    beta = np.asarray(beta, dtype=np.float64)
    val = neg_log_partial_likelihood(data, beta) + lam * np.abs(beta).sum()
    if shift is not None:
        val -= np.asarray(shift) @ beta
    return float(val)


def fit_l1_smooth(
    fun: Callable,
    grad: Callable,
    p: int,
    lam: float,
    init=None,
    tol: float = 1e-10,
    max_iter: int = 200000,
) -> FitResult:
    """Accelerated proximal gradient for ``fun(beta) + lam ||beta||_1``.

    A generic solver driven only by function and gradient oracles.  It is
    slower than ``fit_l1_cox`` but shares no code with it, which makes it a
    useful independent check.
    """
    x = np.zeros(p) if init is None else np.array(init, dtype=np.float64)
    y = x.copy()
    tk = 1.0
    L = 1.0
    fx = fun(x)
    kkt = np.inf
    def prox_step(y, L):
        gy = grad(y)
        fy = fun(y)
        while True:
            z = soft_threshold(y - gy / L, lam / L)
            dz = z - y
            fz = fun(z)
            if fz <= fy + gy @ dz + 0.5 * L * (dz @ dz) + 1e-15 * max(1.0, abs(fy)):
                return z, fz, L
            L *= 2.0

    for it in range(max_iter):
        z, fz, L = prox_step(y, L)
        if fz + lam * np.abs(z).sum() > fx + lam * np.abs(x).sum():
            # restart from x with a plain (monotone) proximal step
            z, fz, L = prox_step(x, L)
            tk = 1.0
            y = x
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * tk * tk))
        y = z + ((tk - 1.0) / t_next) * (z - x)
        x, fx, tk = z, fz, t_next
        L = max(L * 0.9, 1e-12)
        if it % 10 == 0:
            kkt = kkt_residual(grad(x), x, lam)
            if kkt <= tol:
                break
    kkt = kkt_residual(grad(x), x, lam)
    diag = FitDiagnostics(lam, it + 1, kkt, float(fx + lam * np.abs(x).sum()), int(np.count_nonzero(x)), kkt <= tol)
    return FitResult(x, diag)


# ---------------------------------------------------------------------------
# L1-penalized quadratic programs

def quadratic_objective(H, c, w, lam: float) -> float:
    Hw = H @ w if isinstance(H, np.ndarray) else H.matvec(w)
    return float(w @ Hw - 2.0 * c @ w + lam * np.abs(w).sum())


def fit_l1_quadratic(H, c, lam: float, opts: SolverOptions | None = None, init=None) -> FitResult:
    """Minimize ``w' H w - 2 c' w + lam ||w||_1`` by coordinate descent.

    ``H`` is a symmetric PSD array, or an operator with ``matvec``,
    ``column(j)`` and ``diagonal()`` (see ``survival.HessianOperator``), in
    which case only the columns of coordinates that become active are
    ever formed.
    """
    opts = opts or SolverOptions()
    if not lam > 0:
        raise InvalidArgument("lambda must be positive")
    c = np.asarray(c, dtype=np.float64).ravel()
    p = c.shape[0]
    w = np.zeros(p) if init is None else np.array(init, dtype=np.float64).ravel().copy()
    if not isinstance(H, np.ndarray):
        return _fit_l1_quadratic_operator(H, c, lam, opts, w)
    H = np.ascontiguousarray(H, dtype=np.float64)
    if H.shape != (p, p):
        raise InvalidArgument(f"H has shape {H.shape}, expected {(p, p)}")
    tol = 0.1 * opts.tol_kkt
    max_sweeps = opts.max_inner
    wmax = _divergence_bound(np.diag(H), c, lam)
    kkt = np.inf
    for attempt in range(opts.max_outer):
        w, sweeps, _, code = _cd_quad(H, c, w, lam, tol, max_sweeps, opts.active_set, wmax)
        if code >= 0:
            raise UnboundedProblemError(
                f"coordinate {code} has zero curvature and |c_j| > lam/2; the objective is unbounded below"
            )
        if code == -2:
            raise UnboundedProblemError("iterates diverge; lam is too small for this (singular) H")
        g = 2.0 * (H @ w - c)
        kkt = kkt_residual(g, w, lam)
        if kkt <= opts.tol_kkt:
            obj = quadratic_objective(H, c, w, lam)
            return FitResult(w, FitDiagnostics(lam, attempt + 1, kkt, obj, int(np.count_nonzero(w))))
        tol *= 0.1
    # slow drift along a near-null direction looks like non-convergence; certify it exactly
    thr = unbounded_threshold(H, c)
    if lam < thr:
        raise UnboundedProblemError(f"lam={lam:.4g} is below the boundedness threshold {thr:.4g} of this singular H")
    raise ConvergenceError(
        f"quadratic lasso did not converge (KKT residual {kkt:.3g})", beta=w, kkt_residual=kkt
    )


def _divergence_bound(diag, c, lam) -> float:
    pos = diag[diag > 0]
    scale = (np.abs(c).max() + lam) / pos.min() if pos.size else 1.0
    # bounded minimizers sit far below this; beyond it the objective is running off along a null direction
    return 1e4 * max(1.0, scale)


def unbounded_threshold(H, c, rtol: float = 1e-10) -> float:
    """Smallest ``lam`` for which ``w' H w - 2 c' w + lam ||w||_1`` is bounded below.

    Zero when ``H`` is nonsingular.  Otherwise ``2 max c'v / ||v||_1`` over
    the null space of ``H``, found by a linear program.
    """
    from scipy.optimize import linprog

    H = np.asarray(H, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64).ravel()
    evals, evecs = np.linalg.eigh(H)
    null = evecs[:, evals <= rtol * max(float(evals[-1]), 1e-300)]
    r = null.shape[1]
    if r == 0:
        return 0.0
    p = c.shape[0]
    # variables (a, u): maximize c' N a subject to -u <= N a <= u, sum(u) <= 1
    obj = np.concatenate([-(null.T @ c), np.zeros(p)])
    eye = np.eye(p)
    A = np.block([[null, -eye], [-null, -eye], [np.zeros((1, r)), np.ones((1, p))]])
    b = np.concatenate([np.zeros(2 * p), [1.0]])
    bounds = [(None, None)] * r + [(0, None)] * p
    res = linprog(obj, A_ub=A, b_ub=b, bounds=bounds, method="highs")
    if res.status != 0:
        raise ConvergenceError(f"boundedness LP failed: {res.message}", beta=None, kkt_residual=np.nan)
    return max(0.0, -2.0 * float(res.fun))


def safe_lambda(H, c, lam: float, margin: float = 1.25) -> float:
    """``lam``, raised to ``margin`` times the boundedness threshold if needed (dense ``H`` only)."""
    if not isinstance(H, np.ndarray):
        return lam
    return max(lam, margin * unbounded_threshold(H, c))


def _fit_l1_quadratic_operator(op, c, lam, opts, w) -> FitResult:
    p = c.shape[0]
    diag = np.asarray(op.diagonal(), dtype=np.float64)
    wmax = _divergence_bound(diag, c, lam)
    cols: dict[int, np.ndarray] = {}

    def col(j):
        if j not in cols:
            cols[j] = np.asarray(op.column(j), dtype=np.float64)
        return cols[j]

    r = op.matvec(w) if np.any(w) else np.zeros(p)
    half = 0.5 * lam
    kkt = np.inf
    tol = 0.1 * opts.tol_kkt
    for it in range(opts.max_outer * opts.max_inner):
        maxc = 0.0
        for j in range(p):
            hjj = diag[j]
            z = c[j] - r[j] + hjj * w[j]
            if hjj <= 0.0:
                if abs(z) > half:
                    raise UnboundedProblemError(
                        f"coordinate {j} has zero curvature and |c_j| > lam/2; the objective is unbounded below"
                    )
                continue
            new = _soft(z, half) / hjj
            if abs(new) > wmax:
                raise UnboundedProblemError("iterates diverge; lam is too small for this (singular) H")
            delta = new - w[j]
            if delta != 0.0:
                r += col(j) * delta
                w[j] = new
                maxc = max(maxc, 2.0 * hjj * abs(delta))
        if maxc < tol:
            r = op.matvec(w)
            kkt = kkt_residual(2.0 * (r - c), w, lam)
            if kkt <= opts.tol_kkt:
                obj = quadratic_objective(op, c, w, lam)
                return FitResult(w, FitDiagnostics(lam, it + 1, kkt, obj, int(np.count_nonzero(w))))
            tol *= 0.1
    raise ConvergenceError(
        f"quadratic lasso did not converge (KKT residual {kkt:.3g})", beta=w, kkt_residual=kkt
    )


# ---------------------------------------------------------------------------
# tuning

def theory_lambda(c0: float, B: float, p: int, m: int) -> float:
    """``c0 * B * sqrt(log p / m)``, floored at ``LAMBDA_FLOOR``."""
    if c0 <= 0:
        raise InvalidArgument("c0 must be positive")
    if m < 1 or p < 1:
        raise InvalidArgument("p and m must be positive")
    return max(c0 * B * math.sqrt(math.log(p) / m), LAMBDA_FLOOR)


def lambda_max(data: SurvivalDataset, shift=None) -> float:
    """Smallest lambda at which the fit is identically zero."""
    from .survival import gradient

    g = gradient(data, np.zeros(data.p))
    if shift is not None:
        g = g - shift
    return float(np.abs(g).max())


def lambda_path(lam_max: float, n_lambdas: int = 30, ratio: float = 0.01) -> np.ndarray:
    return lam_max * np.logspace(0.0, math.log10(ratio), n_lambdas)


def _partial_loglik_sum(data: SurvivalDataset, beta) -> float:
    return -data.n * neg_log_partial_likelihood(data, beta)


def cv_lambda(
    data: SurvivalDataset,
    folds: int = 5,
    seed: int = 0,
    n_lambdas: int = 30,
    ratio: float = 0.01,
    opts: SolverOptions | None = None,
    return_path: bool = False,
):
    """K-fold cross-validated partial-likelihood deviance over a log path.

    Uses the Verweij-van Houwelingen contribution
    ``l(beta_{-k}) - l_{-k}(beta_{-k})`` so that each held-out fold is
    scored inside the risk sets of the full data.
    """
    if folds < 2:
        raise InvalidArgument("cv needs at least 2 folds")
    if data.n_events < folds:
        raise InvalidArgument(f"{data.n_events} events is fewer than {folds} folds")
    rng = np.random.default_rng(seed)
    # spread events evenly over folds
    ev = rng.permutation(np.flatnonzero(data.events == 1))
    ce = rng.permutation(np.flatnonzero(data.events == 0))
    fold_of = np.empty(data.n, dtype=int)
    fold_of[ev] = np.arange(ev.size) % folds
    fold_of[ce] = (np.arange(ce.size) + ev.size) % folds

    path = lambda_path(lambda_max(data), n_lambdas, ratio)
    dev = np.zeros(path.size)
    for k in range(folds):
        train = data.subset(np.flatnonzero(fold_of != k))
        if train.n_events == 0:
            continue
        beta = np.zeros(data.p)
        for i, lam in enumerate(path):
            beta = fit_l1_cox(train, lam, init=beta, opts=opts).beta
            dev[i] -= 2.0 * (_partial_loglik_sum(data, beta) - _partial_loglik_sum(train, beta))
    best = int(np.argmin(dev))
    if return_path:
        return float(path[best]), path, dev
    return float(path[best])


def select_lambda(problem, rule: str = "theory_scale", **params) -> float:
    """Pick a penalty level.

    ``rule='theory_scale'`` returns ``c0 * B * sqrt(log p / m)``; ``B``
    defaults to ``max |x_ij|`` and ``m`` to the sample size when
    ``problem`` is a dataset.  For a quadratic problem ``(H, c)`` the
    caller supplies ``B`` and ``m``.  ``rule='cv'`` cross-validates a
    dataset (see ``cv_lambda``).
    """
    if rule == "theory_scale":
        c0 = params.get("c0", 1.0)
        if isinstance(problem, SurvivalDataset):
            B = params.get("B", float(np.abs(problem.covariates).max()))
            p = params.get("p", problem.p)
            m = params.get("m", problem.n)
        else:
            H, c = problem
            try:
                B, m = params["B"], params["m"]
            except KeyError:
                raise InvalidArgument("theory_scale on a quadratic problem needs B and m") from None
            p = params.get("p", np.asarray(c).shape[0])
        return theory_lambda(c0, B, p, m)
    if rule == "cv":
        if not isinstance(problem, SurvivalDataset):
            raise InvalidArgument("cv is only defined for datasets")
        return cv_lambda(problem, **params)
    raise InvalidArgument(f"unknown lambda rule {rule!r}")

