"""A center: one immutable local dataset and the request handler around it.

Everything a center computes is a function of its own subjects.  The
handler turns requests into replies made of p-vectors and scalars only.

Request layouts (arrays in order)

``grad_request``
    ``betas`` (r x p) -> ``grad_reply`` with the r local gradients.
``omega_request``
    ``params = [mode, lam, coord, return_vector]``, ``beta_hat``, ``c``,
    ``beta_tilde``, ``global_grad_tilde``, ``point``.
    mode 0 solves the debiasing program and replies ``omega_reply`` with
    ``[omega'(g_k(beta_tilde) - g_k(beta_hat) - global), c'omega,
    omega' H_k omega]`` (plus omega if asked).  ``point`` is unused.
    mode 1 solves the decorrelation program for coordinate ``coord`` and
    replies ``scalar_reply`` with ``[score_k, sigma2_k]`` evaluated at
    ``point`` (plus w if asked).
    mode 2 evaluates ``[c' point, point' H_k(beta_hat) point]`` for a
    direction held by the coordinator.
``hazard_request``
    ``beta_tilde`` and optionally a grid -> ``hazard_reply`` with the local
    event times and Breslow increments, or cumulative sums on the grid.
"""

from __future__ import annotations

import numpy as np

from ..errors import FedCoxError, InvalidArgument, UnboundedProblemError
from ..lasso import SolverOptions, fit_l1_quadratic, safe_lambda
from ..survival import DENSE_HESSIAN_CAP, HessianOperator, SurvivalDataset, gradient, hessian
from .protocol import Message


class _Drop:
    """``H`` with row and column ``j`` removed, as an operator."""

    def __init__(self, op: HessianOperator, j: int):
        self.op = op
        self.j = j
        self.keep = np.delete(np.arange(op.shape[0]), j)

    def matvec(self, v):
        full = np.zeros(self.op.shape[0])
        full[self.keep] = v
        return self.op.matvec(full)[self.keep]

    def column(self, i):
        return self.op.column(int(self.keep[i]))[self.keep]

    def diagonal(self):
        return self.op.diagonal()[self.keep]


def local_hessian(data: SurvivalDataset, beta):
    """Dense Hessian when it fits under the cap, otherwise an operator."""
    if data.p <= DENSE_HESSIAN_CAP:
        return hessian(data, beta)
    return HessianOperator(data, beta)


def _quad(H, v):
    return float(v @ (H @ v if isinstance(H, np.ndarray) else H.matvec(v)))


def solve_omega(data: SurvivalDataset, beta_hat, c, lam: float, opts: SolverOptions | None = None, H=None):
    """``argmin w' H_k(beta_hat) w - 2 c' w + lam ||w||_1``; returns ``(omega, H)``.

    With fewer local events than covariates ``H`` is singular and a small
    ``lam`` can leave the program unbounded below; the solve is then
    repeated at 1.25 times the exact boundedness threshold.
    """
    H = local_hessian(data, beta_hat) if H is None else H
    try:
        return fit_l1_quadratic(H, c, lam, opts).beta, H
    except UnboundedProblemError:
        safe = safe_lambda(H, c, lam)
        if safe <= lam:
            raise
        return fit_l1_quadratic(H, c, safe, opts).beta, H


def solve_w(data: SurvivalDataset, beta_hat, coord: int, lam: float, opts: SolverOptions | None = None, H=None):
    """Decorrelation vector for coordinate ``coord``; returns ``(w, H)``.

    ``w = argmin w' H_gg w - 2 w' H_gn + lam ||w||_1`` with ``n`` the tested
    coordinate and ``g`` the remaining ones, in their original order.
    """
    p = data.p
    if p < 2:
        raise InvalidArgument("the decorrelation program needs p >= 2")
    if not 0 <= coord < p:
        raise InvalidArgument(f"coordinate {coord} out of range for p={p}")
    H = local_hessian(data, beta_hat) if H is None else H
    keep = np.delete(np.arange(p), coord)
    if isinstance(H, np.ndarray):
        Hgg = H[np.ix_(keep, keep)]
        Hgn = H[keep, coord]
    else:
        Hgg = _Drop(H, coord)
        Hgn = H.column(coord)[keep]
    return fit_l1_quadratic(Hgg, Hgn, lam, opts).beta, H


def score_terms(H, w, coord: int, grad_tilde):
    """Local decorrelated score and variance for coordinate ``coord``.

    ``grad_tilde`` is the gradient of the shifted local loss at the null
    point.  Returns ``(grad_tilde[nu] - w' grad_tilde[gamma],
    v' H v)`` with ``v = e_nu - (0, w)``.
    """
    p = grad_tilde.shape[0]
    keep = np.delete(np.arange(p), coord)
    v = np.zeros(p)
    v[coord] = 1.0
    v[keep] = -w
    return float(grad_tilde[coord] - w @ grad_tilde[keep]), _quad(H, v)


def breslow_increments(data: SurvivalDataset, beta):
    """Event times and ``1 / sum_{i at risk} exp(x_i' beta)`` at each of them."""
    c = data._cache
    beta = np.asarray(beta, dtype=np.float64)
    eta = c["Xs"] @ beta
    lse = np.logaddexp.accumulate(eta)[c["end"]] if eta.size else eta
    ds = c["ds"]
    times = c["ts"][ds][::-1]
    inc = np.exp(-lse[ds])[::-1]
    return times.copy(), inc.copy()


class CenterNode:
    """Holds a center's data and answers protocol requests."""

    def __init__(self, index: int, data: SurvivalDataset, opts: SolverOptions | None = None):
        self.index = index
        self.data = data
        self.opts = opts or SolverOptions()

    @property
    def m(self) -> int:
        return self.data.n

    def gradient(self, beta) -> np.ndarray:
        return gradient(self.data, beta)

    def handle(self, msg: Message) -> Message:
        try:
            if msg.type == "grad_request":
                return self._grad(msg)
            if msg.type == "omega_request":
                return self._omega(msg)
            if msg.type == "hazard_request":
                return self._hazard(msg)
            raise InvalidArgument(f"center cannot handle {msg.type!r}")
        except FedCoxError as exc:
            return Message("error", msg.round, text=f"{type(exc).__name__}: {exc}")

    def _grad(self, msg):
        betas = np.atleast_2d(msg.arrays[0])
        return Message("grad_reply", msg.round, [np.stack([self.gradient(b) for b in betas])])

    def _omega(self, msg):
        params, beta_hat, c, beta_tilde, global_tilde, point = msg.arrays
        mode, lam, coord, want = int(params[0]), float(params[1]), int(params[2]), bool(params[3])
        if mode == 0:
            shift = self.gradient(beta_tilde) - global_tilde
            omega, H = solve_omega(self.data, beta_hat, c, lam, self.opts)
            corr = float(omega @ (shift - self.gradient(beta_hat)))
            out = [np.array([corr, float(c @ omega), _quad(H, omega)])]
            if want:
                out.append(omega)
            return Message("omega_reply", msg.round, out)
        if mode == 1:
            shift = self.gradient(beta_tilde) - global_tilde
            w, H = solve_w(self.data, beta_hat, coord, lam, self.opts)
            score, sigma2 = score_terms(H, w, coord, self.gradient(point) - shift)
            out = [np.array([score, sigma2])]
            if want:
                out.append(w)
            return Message("scalar_reply", msg.round, out)
        if mode == 2:
            H = local_hessian(self.data, beta_hat)
            return Message("scalar_reply", msg.round, [np.array([float(c @ point), _quad(H, point)])])
        raise InvalidArgument(f"unknown omega_request mode {mode}")

    def _hazard(self, msg):
        beta = msg.arrays[0]
        times, inc = breslow_increments(self.data, beta)
        if len(msg.arrays) > 1:
            grid = msg.arrays[1]
            cum = np.concatenate([[0.0], np.cumsum(inc)])
            return Message("hazard_reply", msg.round, [grid, cum[np.searchsorted(times, grid, side="right")]])
        return Message("hazard_reply", msg.round, [times, inc])
