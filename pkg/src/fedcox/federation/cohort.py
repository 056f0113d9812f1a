"""Federated cohort, gradient rounds, the GEL iteration and baselines."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConvergenceError, InvalidArgument
from ..lasso import GelCorrection, SolverOptions, fit_l1_cox, fit_l1_quadratic
from ..survival import SurvivalDataset, center_covariates, gradient
from ..tuning import LambdaSchedule, Tuning, default_rounds
from .center import CenterNode, local_hessian
from .protocol import Message
from .transport import InProcessTransport, StreamTransport


class FederatedCohort:
    """K centers behind a transport; center ``principal`` coordinates.

    Parameters
    ----------
    datasets : sequence of SurvivalDataset
        One dataset per center, all of the same size.
    principal : int
        Index of the coordinating center (the one that solves the GEL
        problems).
    transport : {'inproc', 'stream'} or transport instance
    indices : list of arrays, optional
        Row indices of each center in the pooled data, kept for reference.
    """

    def __init__(self, datasets, principal: int = 0, transport="inproc", opts=None, indices=None, codec="binary"):
        datasets = list(datasets)
        if not datasets:
            raise InvalidArgument("a cohort needs at least one center")
        sizes = {d.n for d in datasets}
        if len(sizes) != 1:
            raise InvalidArgument(f"centers must have equal sizes, got {sorted(sizes)}")
        if len({d.p for d in datasets}) != 1:
            raise InvalidArgument("centers disagree on the number of covariates")
        if not 0 <= principal < len(datasets):
            raise InvalidArgument(f"principal index {principal} out of range")
        self.opts = opts or SolverOptions()
        self.centers = [CenterNode(k, d, self.opts) for k, d in enumerate(datasets)]
        self.principal = principal
        self.indices = indices
        if transport == "inproc":
            self.transport = InProcessTransport(self.centers)
        elif transport == "stream":
            self.transport = StreamTransport(self.centers, codec=codec)
        elif isinstance(transport, str):
            raise InvalidArgument(f"unknown transport {transport!r}")
        else:
            self.transport = transport
        self._round = 0

    @property
    def K(self) -> int:
        return len(self.centers)

    @property
    def m(self) -> int:
        return self.centers[0].m

    @property
    def n(self) -> int:
        return self.K * self.m

    @property
    def p(self) -> int:
        return self.centers[0].data.p

    @property
    def comm_log(self):
        return self.transport.log

    @property
    def principal_data(self) -> SurvivalDataset:
        return self.centers[self.principal].data

    def broadcast(self, msg: Message):
        self._round += 1
        msg.round = self._round
        return self.transport.exchange([msg] * self.K)

    def close(self):
        self.transport.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def partition(data: SurvivalDataset, K: int, seed: int = 0, centering: str = "none",
              **kwargs) -> FederatedCohort:
    """Seeded uniform split of ``data`` into ``K`` equal centers.

    ``centering='local'`` subtracts each center's own covariate means.  Every
    center's loss only sees its own risk sets, so this leaves all losses and
    gradients unchanged; it moves the baseline hazard each center refers to.
    Global centering is done by the caller before partitioning.
    """
    if centering not in ("none", "local"):
        raise InvalidArgument(f"unknown centering {centering!r}")
    if K < 1:
        raise InvalidArgument("K must be at least 1")
    rem = data.n % K
    if rem:
        raise InvalidArgument(f"K={K} does not divide n={data.n} (remainder {rem})")
    m = data.n // K
    perm = np.random.default_rng(seed).permutation(data.n)
    blocks = [np.sort(perm[k * m:(k + 1) * m]) for k in range(K)]
    parts = [data.subset(b) for b in blocks]
    if centering == "local":
        parts = [center_covariates(d) for d in parts]
    return FederatedCohort(parts, indices=blocks, **kwargs)


def gradient_round(cohort: FederatedCohort, *betas) -> np.ndarray:
    """Broadcast one or more points; returns local gradients, shape (K, r, p)."""
    B = np.stack([np.asarray(b, dtype=np.float64) for b in betas])
    replies = cohort.broadcast(Message("grad_request", arrays=[B]))
    return np.stack([r.arrays[0] for r in replies])


def aggregate_gradient(cohort: FederatedCohort, beta) -> np.ndarray:
    """``(1/K) sum_k grad L_k(beta)`` from one broadcast round."""
    return gradient_round(cohort, beta)[:, 0, :].mean(axis=0)


@dataclass
class GelTrace:
    iterates: list
    lambdas: list
    comm: list = field(default_factory=list)
    kkt: list = field(default_factory=list)
    global_grads: list = field(default_factory=list)
    error: Exception | None = None

    @property
    def T(self) -> int:
        return len(self.iterates) - 1

    @property
    def final(self) -> np.ndarray:
        return self.iterates[-1]

    @property
    def comm_total(self) -> int:
        return int(sum(self.comm))

    def as_array(self) -> np.ndarray:
        return np.stack(self.iterates)


def gel_iterate(
    cohort: FederatedCohort,
    T: int | None = None,
    schedule: LambdaSchedule | float | None = None,
    init="local_lasso",
    init_lambda: float | None = None,
    opts: SolverOptions | None = None,
    tuning: Tuning | None = None,
) -> GelTrace:
    """Run ``T`` GEL rounds from a local initial estimator.

    Round ``t`` broadcasts ``beta_t``, averages the returned gradients and
    solves the corrected lasso on the principal center, warm-started at
    ``beta_t``.  ``init`` is ``'local_lasso'`` (the principal's lasso at
    ``init_lambda``) or a starting vector.  If a solve fails the trace stops
    at the last good iterate with the error attached.
    """
    opts = opts or cohort.opts
    tuning = tuning or Tuning()
    p, m = cohort.p, cohort.m
    B = float(np.abs(cohort.principal_data.covariates).max()) or 1.0
    T = default_rounds(cohort.K) if T is None else T
    if T < 0:
        raise InvalidArgument("T must be nonnegative")
    if schedule is None:
        schedule = tuning.gel(p, cohort.n, cohort.K, B, T)
    elif not isinstance(schedule, LambdaSchedule):
        schedule = LambdaSchedule(float(schedule))
    local = cohort.principal_data

    if isinstance(init, str):
        if init != "local_lasso":
            raise InvalidArgument(f"unknown init {init!r}")
        lam0 = tuning.init(p, m, B) if init_lambda is None else init_lambda
        fit = fit_l1_cox(local, lam0, opts=opts)
        trace = GelTrace([fit.beta], [lam0], kkt=[fit.diagnostics.kkt_residual])
    else:
        beta0 = np.array(init, dtype=np.float64).ravel()
        if beta0.shape[0] != p:
            raise InvalidArgument(f"init has length {beta0.shape[0]}, expected {p}")
        trace = GelTrace([beta0], [float("nan")], kkt=[float("nan")])

    for t in range(T):
        beta = trace.iterates[-1]
        before = cohort.comm_log.total_floats
        grads = gradient_round(cohort, beta)[:, 0, :]
        g_bar = grads.mean(axis=0)
        corr = GelCorrection.from_gradients(grads[cohort.principal], g_bar, beta)
        lam = schedule(t + 1)
        trace.global_grads.append(g_bar)
        trace.comm.append(cohort.comm_log.total_floats - before)
        try:
            fit = fit_l1_cox(local, lam, corr, init=beta, opts=opts)
        except ConvergenceError as exc:
            trace.error = exc
            break
        trace.iterates.append(fit.beta)
        trace.lambdas.append(lam)
        trace.kkt.append(fit.diagnostics.kkt_residual)
    return trace


# ---------------------------------------------------------------------------
# baselines

def local_lasso(data: SurvivalDataset, lam: float, opts=None) -> np.ndarray:
    return fit_l1_cox(data, lam, opts=opts).beta


def debiased_lasso(data: SurvivalDataset, beta, node_lam: float, opts=None) -> np.ndarray:
    """One-step debiased lasso with a nodewise inverse-Hessian estimate.

    Row ``j`` of the inverse is ``argmin w' H w - 2 e_j' w + node_lam ||w||_1``
    with ``H`` the local Hessian at ``beta``.
    """
    H = local_hessian(data, beta)
    g = gradient(data, beta)
    out = np.array(beta, dtype=np.float64)
    e = np.zeros(data.p)
    for j in range(data.p):
        e[j] = 1.0
        w = fit_l1_quadratic(H, e, node_lam, opts).beta
        e[j] = 0.0
        out[j] -= w @ g
    return out


def baseline_estimators(cohort: FederatedCohort, which: str, lam: float | None = None, node_lam: float | None = None,
                        tuning: Tuning | None = None, opts=None) -> np.ndarray:
    """One-center, averaged, or averaged-debiased local lasso.

    Local fits use ``lam`` (default: the tuning's initial-estimator level);
    the debiased variant uses nodewise programs at ``node_lam``.  These are
    reference estimators evaluated on the centers' data directly; they are
    not routed through the transport.
    """
    tuning = tuning or Tuning()
    opts = opts or cohort.opts
    p, m = cohort.p, cohort.m
    B = float(np.abs(cohort.principal_data.covariates).max()) or 1.0
    lam = tuning.init(p, m, B) if lam is None else lam
    if which == "one_center":
        return local_lasso(cohort.principal_data, lam, opts)
    fits = [local_lasso(c.data, lam, opts) for c in cohort.centers]
    if which == "average":
        return np.mean(fits, axis=0)
    if which == "average_debiased":
        node_lam = tuning.node(p, m, B) if node_lam is None else node_lam
        return np.mean([debiased_lasso(c.data, b, node_lam, opts) for c, b in zip(cohort.centers, fits)], axis=0)
    raise InvalidArgument(f"unknown baseline {which!r}")
