"""Distributed Breslow and kernel-smoothed baseline hazard estimators."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument
from .federation.cohort import FederatedCohort
from .federation.protocol import Message


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous step function that is 0 before the first knot."""

    knots: np.ndarray
    values: np.ndarray
    tau: float = math.inf
    initial: float = 0.0

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.knots, t, side="right")
        vals = np.concatenate([[self.initial], self.values])
        out = vals[idx]
        return float(out) if out.ndim == 0 else out

    def left_limit(self, t):
        t = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.knots, t, side="left")
        vals = np.concatenate([[self.initial], self.values])
        out = vals[idx]
        return float(out) if out.ndim == 0 else out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "value"])
            for t, v in zip(self.knots, self.values):
                w.writerow([repr(float(t)), repr(float(v))])


@dataclass(frozen=True)
class HazardCurve:
    grid: np.ndarray
    values: np.ndarray
    bandwidth: float
    kernel: str

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "value"])
            for t, v in zip(self.grid, self.values):
                w.writerow([repr(float(t)), repr(float(v))])


def epanechnikov(u):
    u = np.asarray(u, dtype=np.float64)
    return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)


def gaussian(u):
    u = np.asarray(u, dtype=np.float64)
    return np.exp(-0.5 * u * u) / math.sqrt(2.0 * math.pi)


KERNELS = {"epanechnikov": epanechnikov, "gaussian": gaussian}


def _hazard_round(cohort: FederatedCohort, beta_tilde, grid=None):
    arrays = [np.asarray(beta_tilde, dtype=np.float64)]
    if grid is not None:
        arrays.append(np.asarray(grid, dtype=np.float64))
    replies = cohort.broadcast(Message("hazard_request", arrays=arrays))
    return [(r.arrays[0], r.arrays[1]) for r in replies]


def _tau(cohort):
    return max(c.data.study_end for c in cohort.centers)


def breslow(cohort: FederatedCohort, beta_tilde, grid=None) -> StepFunction:
    """``(1/K) sum_k sum_{events s <= t in k} 1 / sum_{i in k} Y_i(s) exp(x_i' beta)``.

    With ``grid`` the centers only return their cumulative sums at the grid
    points (no event times leave a center) and the result steps at the grid.
    """
    beta_tilde = np.asarray(beta_tilde, dtype=np.float64)
    if not np.all(np.isfinite(beta_tilde)):
        raise InvalidArgument("beta_tilde must be finite")
    K = cohort.K
    if grid is not None:
        grid = np.sort(np.asarray(grid, dtype=np.float64))
        parts = _hazard_round(cohort, beta_tilde, grid)
        values = np.sum([cum for _, cum in parts], axis=0) / K
        return StepFunction(grid, values, _tau(cohort))
    parts = _hazard_round(cohort, beta_tilde)
    times = np.concatenate([t for t, _ in parts])
    incs = np.concatenate([i for _, i in parts])
    assert np.all(np.isfinite(incs)), "every event subject is in its own risk set"
    order = np.argsort(times, kind="stable")
    knots, inverse = np.unique(times[order], return_inverse=True)
    jumps = np.bincount(inverse, weights=incs[order], minlength=knots.size) / K
    return StepFunction(knots, np.cumsum(jumps), _tau(cohort))


def default_bandwidth(event_times) -> float:
    """Normal-reference rule ``1.06 min(sd, IQR / 1.34) d^(-1/5)`` over the ``d`` event times."""
    t = np.asarray(event_times, dtype=np.float64)
    if t.size < 2:
        raise InvalidArgument("a data-driven bandwidth needs at least two events")
    q75, q25 = np.percentile(t, [75, 25])
    spread = min(float(t.std(ddof=1)), (q75 - q25) / 1.34) or float(t.std(ddof=1))
    return 1.06 * spread * t.size ** (-0.2)


def kernel_hazard(cohort: FederatedCohort, beta_tilde, h: float | None = None, kernel: str = "epanechnikov",
                  grid=None, n_grid: int = 200) -> HazardCurve:
    """Kernel-smoothed baseline hazard ``(1/K) sum_k sum_s K_h(t - s) dL_k(s)``.

    The default grid has ``n_grid`` points on ``[h, q90 - h]``, with ``q90``
    the 90% quantile of the pooled event times, away from the boundary bias
    and the sparse right tail.
    """
    if kernel not in KERNELS:
        raise InvalidArgument(f"unknown kernel {kernel!r}")
    parts = _hazard_round(cohort, beta_tilde)
    times = np.concatenate([t for t, _ in parts])
    h = default_bandwidth(times) if h is None else h
    if not h > 0:
        raise InvalidArgument("bandwidth must be positive")
    tau = _tau(cohort)
    if grid is None:
        hi = float(np.quantile(times, 0.9)) if times.size else tau
        lo, hi = (h, hi - h) if hi > 2 * h else (0.0, hi)
        grid = np.linspace(lo, hi, n_grid)
    grid = np.asarray(grid, dtype=np.float64)
    if np.any(grid < 0) or np.any(grid > tau):
        raise InvalidArgument(f"grid must lie in [0, {tau}]")
    kern = KERNELS[kernel]
    values = np.zeros(grid.shape)
    for t, inc in parts:
        values += kern((grid[:, None] - t[None, :]) / h) @ inc / h
    return HazardCurve(grid, values / cohort.K, h, kernel)
