"""Penalty levels for every L1 problem in the pipeline.

Each level has the rate form ``c * B * sqrt(log p / size)`` where ``size``
is ``n`` for pooled fits and ``m = n / K`` for anything solved on a single
center.  Only the constants are free; the defaults were calibrated on the
simulation designs shipped in ``scripts/`` (see ``scripts/calibrate.py``).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .errors import InvalidArgument
from .lasso import theory_lambda


@dataclass(frozen=True)
class LambdaSchedule:
    """Per-round penalty ``lambda_t`` for the GEL iteration (``t >= 1``).

    ``kind='constant'`` uses ``lam`` every round; ``kind='geometric'`` uses
    ``max(floor, lam * rho**t)``.
    """

    lam: float
    kind: str = "constant"
    rho: float = 0.9
    floor: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "geometric"):
            raise InvalidArgument(f"unknown schedule kind {self.kind!r}")
        if not self.lam > 0:
            raise InvalidArgument("schedule lambda must be positive")
        if not 0 < self.rho <= 1:
            raise InvalidArgument("rho must lie in (0, 1]")

    def __call__(self, t: int) -> float:
        if self.kind == "constant":
            return self.lam
        return max(self.floor, self.lam * self.rho ** t)


@dataclass(frozen=True)
class Tuning:
    """Constants for the rate-scaled penalties.

    Attributes
    ----------
    c_full : float
        Pooled-data lasso, ``c_full * B * sqrt(log p / n)``.  Also the floor
        of the geometric GEL schedule.
    c_gel : float
        First GEL round, on the principal center's ``sqrt(log p / m)`` scale.
    c_init : float
        Initial local lasso ``beta_0`` (the one-center estimator) and the
        local fits inside the averaging baselines.
    c_omega, c_w : float
        Local programs for the debiasing direction and the decorrelation
        vector, ``sqrt(log p / m)`` scale.
    c_node : float
        Nodewise programs of the averaged-debiased baseline.
    schedule, rho : str, float or None
        ``'geometric'`` or ``'constant'``; ``rho=None`` picks the ratio that
        reaches the pooled level at the last round.
    """

    c_full: float = 0.47
    c_gel: float = 0.47
    c_init: float = 0.83
    c_omega: float = 1.5
    c_w: float = 0.7
    c_node: float = 1.1
    schedule: str = "geometric"
    rho: float | None = None

    def full(self, p: int, n: int, B: float = 1.0) -> float:
        return theory_lambda(self.c_full, B, p, n)

    def init(self, p: int, m: int, B: float = 1.0) -> float:
        return theory_lambda(self.c_init, B, p, m)

    def gel(self, p: int, n: int, K: int, B: float = 1.0, T: int | None = None) -> LambdaSchedule:
        """GEL schedule from the local level down to the pooled one.

        With ``rho=None`` the ratio is chosen so that round ``T`` is the
        first to reach the floor (0.9 when ``T`` is unknown).
        """
        m = n // K
        lam = theory_lambda(self.c_gel, B, p, m)
        if self.schedule == "constant":
            return LambdaSchedule(lam)
        floor = min(lam, self.full(p, n, B))
        rho = self.rho
        if rho is None:
            rho = (floor / lam) ** (1.0 / T) if T else 0.9
        return LambdaSchedule(lam, "geometric", min(rho, 1.0), floor=floor)

    def omega(self, p: int, m: int, B: float = 1.0) -> float:
        return theory_lambda(self.c_omega, B, p, m)

    def w(self, p: int, m: int, B: float = 1.0) -> float:
        return theory_lambda(self.c_w, B, p, m)

    def node(self, p: int, m: int, B: float = 1.0) -> float:
        return theory_lambda(self.c_node, B, p, m)

    def to_dict(self) -> dict:
        return asdict(self)


def default_rounds(K: int, A0: float = 0.5) -> int:
    """``ceil(log K / (2 log(1/A0)))``, at least 1; ``A0`` is the contraction factor."""
    if not 0 < A0 < 1:
        raise InvalidArgument("A0 must lie in (0, 1)")
    if K <= 1:
        return 1
    return max(1, math.ceil(math.log(K) / (2.0 * math.log(1.0 / A0))))
