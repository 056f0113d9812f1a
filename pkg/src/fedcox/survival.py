"""Cox partial-likelihood machinery for time-fixed covariates.

All likelihood quantities are averages over subjects (divided by ``n``),
so a center's loss is on the same scale as the pooled loss.  Risk sets use
``Y_i(t) = 1{Z_i >= t}``; tied times share a risk set.

Every evaluation reuses the descending-time permutation cached on the
dataset, and works in log space so that large linear predictors do not
overflow the risk-set denominators.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from numba import njit

from .errors import CapacityError, InvalidArgument, NoEventsWarning

DENSE_HESSIAN_CAP = 2000
TIE_POLICIES = ("reject_ties", "jitter")


@dataclass(frozen=True, eq=False)
class SurvivalDataset:
    """Observed times, event indicators and an ``n x p`` covariate matrix.

    Parameters
    ----------
    times : array_like
        Observed times ``Z_i = min(T_i, C_i)``, finite and nonnegative.
    events : array_like
        Event indicators ``delta_i`` in {0, 1}.
    covariates : array_like
        Covariate matrix, one row per subject.
    study_end : float, optional
        End of follow-up ``tau``; defaults to the largest observed time.
    ties : {'reject_ties', 'jitter'}
        What to do when two event times coincide.  ``'jitter'`` breaks ties
        inside each tied block by adding ``1e-9 * rank`` with the ranks drawn
        from a generator seeded with ``tie_seed``.
    """

    times: np.ndarray
    events: np.ndarray
    covariates: np.ndarray
    study_end: float | None = None
    ties: str = "reject_ties"
    tie_seed: int = 0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        times = np.array(self.times, dtype=np.float64).ravel()
        events = np.array(self.events).ravel()
        X = np.array(self.covariates, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.ndim != 2:
            raise InvalidArgument("covariates must be a 2-d array")
        n = X.shape[0]
        if times.shape[0] != n or events.shape[0] != n:
            raise InvalidArgument(
                f"length mismatch: {times.shape[0]} times, {events.shape[0]} events, {n} covariate rows"
            )
        if not np.all(np.isfinite(times)) or np.any(times < 0):
            raise InvalidArgument("times must be finite and nonnegative")
        if not np.all(np.isin(events, (0, 1))):
            raise InvalidArgument("events must be 0/1 indicators")
        if not np.all(np.isfinite(X)):
            raise InvalidArgument("covariates must be finite")
        if self.ties not in TIE_POLICIES:
            raise InvalidArgument(f"unknown ties policy {self.ties!r}")
        events = events.astype(np.int8)

        times = _apply_tie_policy(times, events, self.ties, self.tie_seed)

        tau = float(times.max()) if (self.study_end is None and n) else self.study_end
        for arr in (times, events, X):
            arr.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "events", events)
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "study_end", None if tau is None else float(tau))

        # Descending-time permutation and tie blocks, computed once.
        order = np.argsort(-times, kind="stable")
        ts = times[order]
        start = np.searchsorted(-ts, -ts, side="left")
        end = np.searchsorted(-ts, -ts, side="right") - 1
        Xs = np.ascontiguousarray(X[order])
        ds = events[order].astype(bool)
        for arr in (order, ts, start, end, Xs, ds):
            arr.setflags(write=False)
        self._cache.update(order=order, ts=ts, start=start, end=end, Xs=Xs, ds=ds)

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def n_events(self) -> int:
        return int(self.events.sum())

    def subset(self, index) -> "SurvivalDataset":
        """Rows ``index`` as a new dataset (same tie policy, same tau)."""
        index = np.asarray(index)
        return SurvivalDataset(
            self.times[index],
            self.events[index],
            self.covariates[index],
            study_end=self.study_end,
            ties=self.ties,
            tie_seed=self.tie_seed,
        )

    def with_covariates(self, X) -> "SurvivalDataset":
        return SurvivalDataset(
            self.times, self.events, X, study_end=self.study_end, ties=self.ties, tie_seed=self.tie_seed
        )

    def with_events(self, events) -> "SurvivalDataset":
        return SurvivalDataset(
            self.times, events, self.covariates, study_end=self.study_end, ties=self.ties, tie_seed=self.tie_seed
        )


def _apply_tie_policy(times, events, policy, seed):
    ev_times = times[events == 1]
    if ev_times.size == np.unique(ev_times).size:
        return times
    if policy == "reject_ties":
        raise InvalidArgument(
            "tied event times found; pass ties='jitter' to break them deterministically"
        )
    rng = np.random.default_rng(seed)
    times = times.copy()
    uniq, inverse, counts = np.unique(times, return_inverse=True, return_counts=True)
    for g in np.flatnonzero(counts > 1):
        members = np.flatnonzero(inverse == g)
        ranks = rng.permutation(members.size)
        times[members] = times[members] + 1e-9 * ranks
    ev_times = times[events == 1]
    if ev_times.size != np.unique(ev_times).size:
        raise InvalidArgument("jitter failed to separate tied event times")
    return times


def center_covariates(data: SurvivalDataset, mean=None) -> SurvivalDataset:
    """Subtract ``mean`` (default: the column means of ``data``).

    The partial likelihood is invariant to this shift; it only matters for
    the baseline hazard, which refers to the centered covariate scale.
    """
    if mean is None:
        mean = data.covariates.mean(axis=0)
    return data.with_covariates(data.covariates - np.asarray(mean, dtype=np.float64))


# ---------------------------------------------------------------------------
# risk-set sweeps

class RiskSetSnapshot(NamedTuple):
    s0: float
    s1: np.ndarray
    s2: np.ndarray | None


def _check_beta(data: SurvivalDataset, beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=np.float64).ravel()
    if beta.shape[0] != data.p:
        raise InvalidArgument(f"beta has length {beta.shape[0]}, expected {data.p}")
    if not np.all(np.isfinite(beta)):
        raise InvalidArgument("beta must be finite")
    return beta


def risk_set_quantities(data: SurvivalDataset, beta, t: float, second_order: bool = True) -> RiskSetSnapshot:
    """``S^(l)(beta, t) = (1/n) sum_i Y_i(t) x_i^{(x)l} exp(x_i' beta)`` for l = 0, 1, 2."""
    beta = _check_beta(data, beta)
    if data.study_end is not None and not (0 <= t <= data.study_end):
        raise InvalidArgument(f"t={t} outside [0, {data.study_end}]")
    X = data.covariates
    w = np.where(data.times >= t, np.exp(X @ beta), 0.0) / data.n
    s2 = (X * w[:, None]).T @ X if second_order else None
    return RiskSetSnapshot(float(w.sum()), X.T @ w, s2)


class _Sweep(NamedTuple):
    eta: np.ndarray      # linear predictor, descending-time order
    lse: np.ndarray      # log sum_{l in R(Z_k)} exp(eta_l), per position
    logc: np.ndarray     # log sum_{events i: Z_i <= Z_k} 1 / S0_i, per position


def _sweep(data: SurvivalDataset, beta: np.ndarray) -> _Sweep:
    c = data._cache
    eta = c["Xs"] @ beta
    lse_run = np.logaddexp.accumulate(eta) if eta.size else eta
    lse = lse_run[c["end"]]
    v = np.where(c["ds"], -lse, -np.inf)
    rc = np.logaddexp.accumulate(v[::-1])[::-1] if v.size else v
    logc = rc[c["start"]]
    return _Sweep(eta, lse, logc)


def _no_events(data: SurvivalDataset) -> bool:
    if data.n_events == 0:
        warnings.warn("dataset has no events; loss and gradient are identically zero", NoEventsWarning, stacklevel=3)
        return True
    return False


def neg_log_partial_likelihood(data: SurvivalDataset, beta) -> float:
    """Average negative log partial likelihood."""
    beta = _check_beta(data, beta)
    if _no_events(data):
        return 0.0
    sw = _sweep(data, beta)
    ds = data._cache["ds"]
    return float(np.sum(sw.lse[ds] - sw.eta[ds]) / data.n)


def eta_derivatives(data: SurvivalDataset, beta):
    """Loss plus first and diagonal second derivatives in the linear predictor.

    Returns ``(loss, g, h)`` with ``g`` and ``h`` in descending-time order
    (aligned with ``data._cache['Xs']``).  ``X' g`` is the gradient in beta,
    and ``h`` is the diagonal of the Hessian with respect to ``eta``, which
    the penalized weighted least squares solver uses as its weights.
    """
    beta = _check_beta(data, beta)
    n = data.n
    ds = data._cache["ds"]
    if data.n_events == 0:
        return 0.0, np.zeros(n), np.zeros(n)
    eta, lse, logc = _sweep(data, beta)
    loss = float(np.sum(lse[ds] - eta[ds]) / n)
    a = np.exp(eta + logc)
    v2 = np.where(ds, -2.0 * lse, -np.inf)
    logd = np.logaddexp.accumulate(v2[::-1])[::-1][data._cache["start"]]
    h = np.maximum(a - np.exp(2.0 * eta + logd), 0.0) / n
    g = (a - ds) / n
    return loss, g, h


def gradient(data: SurvivalDataset, beta) -> np.ndarray:
    """Gradient ``-(1/n) sum_{events} {x_i - xbar(beta, Z_i)}`` via one sorted sweep."""
    beta = _check_beta(data, beta)
    if _no_events(data):
        return np.zeros(data.p)
    eta, _, logc = _sweep(data, beta)
    g = (np.exp(eta + logc) - data._cache["ds"]) / data.n
    return data._cache["Xs"].T @ g


def loss_and_gradient(data: SurvivalDataset, beta):
    loss, g, _ = eta_derivatives(data, beta)
    return loss, data._cache["Xs"].T @ g


@njit(cache=True)
def _running_means(Xs, eta, lse_run):
    n, p = Xs.shape
    out = np.empty((n, p))
    mean = np.zeros(p)
    for k in range(n):
        w = np.exp(eta[k] - lse_run[k])
        for j in range(p):
            mean[j] += w * (Xs[k, j] - mean[j])
            out[k, j] = mean[j]
    return out


def _hessian_parts(data: SurvivalDataset, beta):
    """Weights ``a`` and the risk-set means at event times.

    The Hessian is ``(1/n) [X' diag(a) X - E' E]`` where row i of ``E`` is
    ``xbar(beta, Z_i)`` for event i.
    """
    c = data._cache
    eta = c["Xs"] @ beta
    lse_run = np.logaddexp.accumulate(eta)
    lse = lse_run[c["end"]]
    v = np.where(c["ds"], -lse, -np.inf)
    logc = np.logaddexp.accumulate(v[::-1])[::-1][c["start"]]
    a = np.exp(eta + logc)
    means = _running_means(c["Xs"], eta, lse_run)
    E = means[c["end"][c["ds"]]]
    return a, E


def hessian(data: SurvivalDataset, beta, cap: int = DENSE_HESSIAN_CAP) -> np.ndarray:
    """Dense Hessian ``(1/n) sum_{events} V(beta, Z_i)``."""
    beta = _check_beta(data, beta)
    if data.p > cap:
        raise CapacityError(
            f"p={data.p} exceeds the dense Hessian cap ({cap}); use hessian_vector_product "
            "or HessianOperator instead"
        )
    if data.n_events == 0:
        return np.zeros((data.p, data.p))
    a, E = _hessian_parts(data, beta)
    Xs = data._cache["Xs"]
    H = ((Xs * a[:, None]).T @ Xs - E.T @ E) / data.n
    return 0.5 * (H + H.T)


def hessian_vector_product(data: SurvivalDataset, beta, v) -> np.ndarray:
    beta = _check_beta(data, beta)
    v = np.asarray(v, dtype=np.float64)
    if data.n_events == 0:
        return np.zeros(data.p)
    return HessianOperator(data, beta).matvec(v)


class HessianOperator:
    """Matrix-free Hessian at a fixed ``beta``; memory is O(n p), not O(p^2)."""

    def __init__(self, data: SurvivalDataset, beta):
        self.data = data
        self.beta = _check_beta(data, beta)
        self.shape = (data.p, data.p)
        if data.n_events == 0:
            self._a = np.zeros(data.n)
            self._E = np.zeros((0, data.p))
        else:
            self._a, self._E = _hessian_parts(data, self.beta)

    def matvec(self, v) -> np.ndarray:
        Xs = self.data._cache["Xs"]
        u = Xs @ v
        return (Xs.T @ (self._a * u) - self._E.T @ (self._E @ v)) / self.data.n

    def column(self, j: int) -> np.ndarray:
        Xs = self.data._cache["Xs"]
        xj = Xs[:, j]
        return (Xs.T @ (self._a * xj) - self._E.T @ self._E[:, j]) / self.data.n

    def diagonal(self) -> np.ndarray:
        Xs = self.data._cache["Xs"]
        return (self._a @ (Xs * Xs) - np.sum(self._E * self._E, axis=0)) / self.data.n

    def dense(self) -> np.ndarray:
        Xs = self.data._cache["Xs"]
        H = ((Xs * self._a[:, None]).T @ Xs - self._E.T @ self._E) / self.data.n
        return 0.5 * (H + H.T)
