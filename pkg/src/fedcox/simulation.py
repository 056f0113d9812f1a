"""Synthetic survival data, evaluation metrics and the Monte-Carlo driver.

The generator draws ``x ~ N(0, I_p)`` clipped entrywise to ``[-clip, clip]``,
``T | x ~ Exp(exp(x' beta))`` (unit baseline hazard) and independent
censoring ``C | x ~ Exp(censor_scale * exp(x' beta))``, so the censoring
fraction is ``censor_scale / (1 + censor_scale)``.

``run_experiment`` replays the studies replication by replication.  Each
replication draws its own generator from ``SeedSequence([seed, rep])``, so
reports do not depend on how replications are spread over workers.
"""

from __future__ import annotations

import csv
import json
import math
import re
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import FedCoxError, InvalidArgument
from .federation.cohort import baseline_estimators, debiased_lasso, gel_iterate, local_lasso, partition
from .hazard import StepFunction, breslow
from .inference import (
    averaged_debiased_report,
    coordinate_test,
    infer_linear,
    local_linear_report,
    local_score_report,
    trace_pair,
)
from .lasso import SolverOptions, fit_l1_cox
from .survival import SurvivalDataset, center_covariates
from .tuning import Tuning

STUDIES = ("estimation", "test_size", "test_power", "ci_coverage", "breslow", "cindex")
METHODS = ("iterated", "full", "one_center", "avg_debiased")


@dataclass(frozen=True)
class SimConfig:
    """One simulation design.

    ``beta_star`` defaults to ``(nu_star, 2, 2, 2, 0, ..., 0)``.
    """

    n: int = 1000
    p: int = 50
    K: int = 2
    beta_star: tuple | None = None
    censor_scale: float = 3.0 / 7.0
    baseline: str = "constant_1"
    clip: float = 1.0
    replications: int = 400
    seed: int = 0
    nu_star: float = 0.0
    power_nu: float = 0.5
    rounds: int = 10
    alpha: float = 0.05
    centering: str = "global"
    transport: str = "inproc"
    breslow_horizon: float = 1.5
    tuning: Tuning = field(default_factory=Tuning)

    def __post_init__(self):
        if self.n < 1 or self.p < 1 or self.K < 1:
            raise InvalidArgument("n, p and K must be positive")
        if self.n % self.K:
            raise InvalidArgument(f"K={self.K} does not divide n={self.n} (remainder {self.n % self.K})")
        if not self.censor_scale > 0:
            raise InvalidArgument("censor_scale must be positive")
        if self.baseline != "constant_1":
            raise InvalidArgument(f"unsupported baseline {self.baseline!r}")
        if self.centering not in ("global", "local", "none"):
            raise InvalidArgument(f"unknown centering {self.centering!r}")
        if self.beta_star is not None and len(self.beta_star) != self.p:
            raise InvalidArgument(f"beta_star has length {len(self.beta_star)}, expected p={self.p}")
        if isinstance(self.tuning, dict):
            object.__setattr__(self, "tuning", Tuning(**self.tuning))

    @property
    def beta(self) -> np.ndarray:
        if self.beta_star is not None:
            return np.asarray(self.beta_star, dtype=np.float64)
        b = np.zeros(self.p)
        b[0] = self.nu_star
        b[1:4] = 2.0
        return b

    def to_dict(self) -> dict:
        d = asdict(self)
        d["beta_star"] = None if self.beta_star is None else list(self.beta_star)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgument(f"unknown config keys {sorted(unknown)}")
        d = dict(d)
        if d.get("beta_star") is not None:
            d["beta_star"] = tuple(float(x) for x in d["beta_star"])
        if "tuning" in d and isinstance(d["tuning"], dict):
            d["tuning"] = Tuning(**d["tuning"])
        return cls(**d)


def load_config(path) -> SimConfig:
    """Read a ``SimConfig`` from TOML or JSON (chosen by suffix)."""
    path = Path(path)
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        with path.open("rb") as fh:
            d = tomllib.load(fh)
    else:
        d = json.loads(path.read_text())
    return SimConfig.from_dict(d.get("simulation", d))


def rep_rng(seed: int, rep: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, rep]))


def generate_dataset(cfg: SimConfig, rep_seed: int) -> SurvivalDataset:
    rng = rep_rng(cfg.seed, rep_seed)
    X = np.clip(rng.standard_normal((cfg.n, cfg.p)), -cfg.clip, cfg.clip)
    rate = np.exp(X @ cfg.beta)
    T = rng.exponential(1.0 / rate)
    C = rng.exponential(1.0 / (cfg.censor_scale * rate))
    return SurvivalDataset(np.minimum(T, C), (T <= C).astype(np.int8), X)


# ---------------------------------------------------------------------------
# metrics

def km_censoring_survival(train: SurvivalDataset) -> StepFunction:
    """Kaplan-Meier estimate of ``P(C > t)`` (censorings are the events)."""
    if train.n == 0:
        raise InvalidArgument("empty training set")
    t = train.times
    cens = 1 - train.events
    knots = np.unique(t[cens == 1])
    if knots.size == 0:
        return StepFunction(np.array([]), np.array([]), float(t.max()), initial=1.0)
    at_risk = np.array([(t >= s).sum() for s in knots], dtype=np.float64)
    d = np.array([((t == s) & (cens == 1)).sum() for s in knots], dtype=np.float64)
    return StepFunction(knots, np.cumprod(1.0 - d / at_risk), float(t.max()), initial=1.0)


def c_index_ipw(train: SurvivalDataset, test: SurvivalDataset, beta, tau_w: float | None = None,
                return_info: bool = False):
    """Concordance with inverse-probability-of-censoring weights.

    Usable pairs ``(i, j)`` have ``delta_i = 1`` and ``Z_i < Z_j`` and get
    weight ``G(Z_i)^-2``, with ``G`` the Kaplan-Meier censoring survival of
    ``train``.  Risk-score ties count one half.  Subjects with
    ``G(Z_i) = 0`` (or ``Z_i >= tau_w``) are dropped as the first member of
    a pair; ``info['truncated']`` counts them.
    """
    G = km_censoring_survival(train)
    beta = np.asarray(beta, dtype=np.float64)
    risk = test.covariates @ beta
    z = test.times
    g = np.asarray(G(z), dtype=np.float64)
    first = test.events == 1
    bad = first & ((g <= 0) | ((z >= tau_w) if tau_w is not None else False))
    first = first & ~bad
    idx = np.flatnonzero(first)
    w = np.zeros(test.n)
    w[idx] = 1.0 / g[idx] ** 2
    later = z[None, :] > z[idx][:, None]
    conc = (risk[idx][:, None] > risk[None, :]) + 0.5 * (risk[idx][:, None] == risk[None, :])
    num = float(np.sum(w[idx][:, None] * later * conc))
    den = float(np.sum(w[idx][:, None] * later))
    if den == 0:
        raise InvalidArgument("the test set has no usable pairs")
    c = num / den
    if return_info:
        return c, {"truncated": int(bad.sum()), "pairs": int(later.sum())}
    return c


# ---------------------------------------------------------------------------
# replications

def _prepare(cfg: SimConfig, rep: int, nu_star: float | None = None):
    """Config, raw data and the data the estimators see (possibly centered)."""
    if nu_star is not None and nu_star != cfg.nu_star:
        cfg = replace(cfg, nu_star=nu_star)
    raw = generate_dataset(cfg, rep)
    return cfg, raw, center_covariates(raw) if cfg.centering == "global" else raw


def _fits(cfg: SimConfig, data: SurvivalDataset, rep: int, opts: SolverOptions, need_avg: bool):
    """Everything the studies share: cohort, GEL trace, full fit, baselines."""
    tun = cfg.tuning
    cohort = partition(data, cfg.K, seed=rep, transport=cfg.transport, opts=opts,
                       centering="local" if cfg.centering == "local" else "none")
    trace = gel_iterate(cohort, T=cfg.rounds, opts=opts, tuning=tun)
    if trace.error is not None:
        raise trace.error
    lam_full = tun.full(cfg.p, cfg.n, _B(data))
    full = fit_l1_cox(data, lam_full, opts=opts).beta
    out = {"rep": rep, "cohort": cohort, "trace": trace, "full": full, "one_center": trace.iterates[0]}
    if need_avg:
        lam0 = trace.lambdas[0]
        out["local"] = [trace.iterates[0] if k == cohort.principal else local_lasso(c.data, lam0, opts)
                        for k, c in enumerate(cohort.centers)]
    return out


def _B(data):
    return float(np.abs(data.covariates).max()) or 1.0


def _avg_debiased(cfg, fits, opts):
    cohort = fits["cohort"]
    lam = cfg.tuning.node(cfg.p, cohort.m, _B(cohort.principal_data))
    return np.mean([debiased_lasso(c.data, b, lam, opts) for c, b in zip(cohort.centers, fits["local"])], axis=0)


def _inference_records(cfg, fits, data, opts, kind: str) -> dict:
    """p-values (kind='test') or CI hits and widths (kind='ci') for every method."""
    tun = cfg.tuning
    cohort, trace = fits["cohort"], fits["trace"]
    p, m, n = cfg.p, cohort.m, cfg.n
    B = _B(data)
    bt, bh, gbar = trace_pair(trace)
    rec = {}
    truth = cfg.beta[0]
    c = np.zeros(p)
    c[0] = 1.0

    def put(name, rep):
        if kind == "test":
            rec[f"p_{name}"] = rep.p_value
            rec[f"reject_{name}"] = int(rep.reject)
        else:
            rec[f"hit_{name}"] = int(rep.ci_low <= truth <= rep.ci_high)
            rec[f"width_{name}"] = rep.ci_high - rep.ci_low

    def attempt(name, fn):
        try:
            put(name, fn())
        except FedCoxError as exc:
            rec[f"error_{name}"] = f"{type(exc).__name__}: {exc}"

    if kind == "test":
        attempt("iterated", lambda: coordinate_test(cohort, bt, bh, 0, cfg.alpha, tun.w(p, m, B), gbar))
        attempt("full", lambda: local_score_report(data, fits["full"], 0, tun.w(p, n, B), cfg.alpha, opts))
        attempt("one_center", lambda: local_score_report(cohort.principal_data, fits["one_center"], 0,
                                                         tun.w(p, m, B), cfg.alpha, opts))
        attempt("avg_debiased", lambda: averaged_debiased_report(cohort, fits["local"], c, tun.node(p, m, B),
                                                                 cfg.alpha, opts))
    else:
        attempt("iterated", lambda: infer_linear(cohort, bt, bh, c, cfg.alpha, tun.omega(p, m, B), gbar))
        attempt("full", lambda: local_linear_report(data, fits["full"], c, tun.omega(p, n, B), cfg.alpha, opts))
        attempt("one_center", lambda: local_linear_report(cohort.principal_data, fits["one_center"], c,
                                                          tun.omega(p, m, B), cfg.alpha, opts))
        attempt("avg_debiased", lambda: averaged_debiased_report(cohort, fits["local"], c, tun.node(p, m, B),
                                                                 cfg.alpha, opts))
    return rec


def run_replication(cfg: SimConfig, rep: int, studies, opts: SolverOptions | None = None) -> dict:
    """All requested studies for one replication; failures are recorded, not raised."""
    opts = opts or SolverOptions()
    studies = tuple(studies)
    rec = {"rep": rep}
    t0 = time.perf_counter()
    shared = [s for s in studies if s in ("estimation", "test_size", "ci_coverage", "breslow")]
    try:
        if shared:
            c0, raw, data = _prepare(cfg, rep)
            need_avg = any(s in studies for s in ("estimation", "test_size", "ci_coverage"))
            fits = _fits(c0, data, rep, opts, need_avg)
            fits["raw"] = raw
            rec.update(_study_records(c0, fits, data, opts, studies))
            fits["cohort"].close()
        if "test_power" in studies:
            c1, _, data = _prepare(cfg, rep, cfg.power_nu)
            fits = _fits(c1, data, rep, opts, True)
            r = _inference_records(c1, fits, data, opts, "test")
            rec.update({k.replace("p_", "pp_", 1).replace("reject_", "power_", 1): v for k, v in r.items()})
            fits["cohort"].close()
    except FedCoxError as exc:
        rec["error"] = f"{type(exc).__name__}: {exc}"
    except Exception as exc:  # recorded so one bad replication never kills a run
        rec["error"] = f"{type(exc).__name__}: {exc} | {traceback.format_exc(limit=3)}"
    rec["seconds"] = time.perf_counter() - t0
    return rec


def _study_records(cfg, fits, data, opts, studies) -> dict:
    rec = {}
    beta = cfg.beta
    trace = fits["trace"]
    if "estimation" in studies:
        for t, b in enumerate(trace.iterates):
            rec[f"err_t{t}"] = float(np.linalg.norm(b - beta))
        rec["err_full"] = float(np.linalg.norm(fits["full"] - beta))
        rec["err_one_center"] = float(np.linalg.norm(fits["one_center"] - beta))
        rec["err_average"] = float(np.linalg.norm(np.mean(fits["local"], axis=0) - beta))
        try:
            rec["err_avg_debiased"] = float(np.linalg.norm(_avg_debiased(cfg, fits, opts) - beta))
        except FedCoxError as exc:
            rec["error_avg_debiased_est"] = f"{type(exc).__name__}: {exc}"
        rec["comm_floats"] = trace.comm_total
    if "test_size" in studies:
        rec.update(_inference_records(cfg, fits, data, opts, "test"))
    if "ci_coverage" in studies:
        rec.update(_inference_records(cfg, fits, data, opts, "ci"))
    if "breslow" in studies:
        # the partial likelihood ignores covariate shifts, so the fit carries
        # over to the raw covariates, whose baseline is the generator's
        with partition(fits["raw"], cfg.K, seed=fits["rep"]) as raw_cohort:
            L = breslow(raw_cohort, trace.iterates[-2])
        grid = np.concatenate([L.knots[L.knots <= cfg.breslow_horizon], [cfg.breslow_horizon]])
        # the sup over [0, H] of |L(t) - t| is attained at a knot or its left limit
        err = max(np.max(np.abs(L(grid) - grid)), np.max(np.abs(L.left_limit(grid) - grid)))
        rec["breslow_sup"] = float(err)
    return rec


# ---------------------------------------------------------------------------
# reports

def _median_se(x, rng, B=1000):
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        return float("nan")
    boots = np.median(x[rng.integers(0, x.size, size=(B, x.size))], axis=1)
    return float(boots.std(ddof=1))


@dataclass
class ExperimentReport:
    config: dict
    studies: tuple
    records: list
    aggregates: dict = field(default_factory=dict)
    exclusions: dict = field(default_factory=dict)
    wall_seconds: float = 0.0

    def column(self, key) -> np.ndarray:
        return np.array([r[key] for r in self.records if key in r and r[key] is not None], dtype=np.float64)

    def to_json(self, path=None) -> str:
        body = {
            "config": self.config,
            "studies": list(self.studies),
            "aggregates": self.aggregates,
            "exclusions": self.exclusions,
            "replications": len(self.records),
        }
        text = json.dumps(body, indent=2, sort_keys=True, default=float)
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_csv(self, path) -> None:
        keys = []
        for r in self.records:
            keys += [k for k in r if k not in keys]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys, restval="")
            w.writeheader()
            for r in self.records:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})

    def to_tsv(self, out_dir) -> list:
        """gnuplot-ready tables for the estimation, p-value, rejection and CI families."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        agg = self.aggregates
        ts = sorted(int(m.group(1)) for m in map(re.compile(r"median_err_t(\d+)$").match, agg) if m)
        if ts:
            path = out_dir / "estimation.tsv"
            with path.open("w") as fh:
                fh.write("# t\tmedian_err\tse\tfull\n")
                for t in ts:
                    fh.write(f"{t}\t{agg[f'median_err_t{t}']!r}\t{agg[f'median_err_t{t}_se']!r}\t"
                             f"{agg.get('median_err_full', float('nan'))!r}\n")
            written.append(path)
        for prefix, name in (("p_", "pvalues_h0.tsv"), ("pp_", "pvalues_h1.tsv")):
            cols = {m: np.sort(self.column(prefix + m)) for m in METHODS}
            if any(c.size for c in cols.values()):
                path = out_dir / name
                size = max(c.size for c in cols.values())
                with path.open("w") as fh:
                    fh.write("# uniform_quantile\t" + "\t".join(METHODS) + "\n")
                    for i in range(size):
                        row = [repr((i + 0.5) / size)] + [repr(float(c[i])) if i < c.size else "nan"
                                                            for c in cols.values()]
                        fh.write("\t".join(row) + "\n")
                written.append(path)
        rows = [(m, agg.get(f"size_{m}"), agg.get(f"power_{m}"), agg.get(f"coverage_{m}"),
                 agg.get(f"median_width_{m}")) for m in METHODS]
        if any(any(v is not None for v in r[1:]) for r in rows):
            path = out_dir / "inference.tsv"
            with path.open("w") as fh:
                fh.write("# method\tsize\tpower\tcoverage\tmedian_width\n")
                for r in rows:
                    fh.write("\t".join([r[0]] + [repr(float(v)) if v is not None else "nan" for v in r[1:]]) + "\n")
            written.append(path)
        return written


def aggregate(records, studies, seed: int = 0) -> tuple[dict, dict]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2**31 - 1]))
    agg, excl = {}, {}
    good = [r for r in records if "error" not in r]
    excl["replication_errors"] = len(records) - len(good)

    def col(key):
        return np.array([r[key] for r in good if key in r], dtype=np.float64)

    def prop(key, name):
        x = col(key)
        if x.size:
            agg[name] = float(x.mean())
            agg[name + "_se"] = float(math.sqrt(max(x.mean() * (1 - x.mean()), 0.0) / x.size))
            agg[name + "_count"] = int(x.size)

    if "estimation" in studies:
        keys = sorted({k for r in good for k in r if k.startswith("err_")})
        for k in keys:
            x = col(k)
            agg[f"median_{k}"] = float(np.median(x))
            agg[f"median_{k}_se"] = _median_se(x, rng)
        comm = col("comm_floats")
        if comm.size:
            agg["comm_floats_per_rep"] = float(comm.mean())
    for m in METHODS:
        if "test_size" in studies:
            prop(f"reject_{m}", f"size_{m}")
            excl[f"test_size_{m}"] = sum(1 for r in good if f"error_{m}" in r and f"p_{m}" not in r)
        if "test_power" in studies:
            prop(f"power_{m}", f"power_{m}")
        if "ci_coverage" in studies:
            prop(f"hit_{m}", f"coverage_{m}")
            w = col(f"width_{m}")
            if w.size:
                agg[f"median_width_{m}"] = float(np.median(w))
                agg[f"median_width_{m}_se"] = _median_se(w, rng)
    if "breslow" in studies:
        x = col("breslow_sup")
        if x.size:
            agg["breslow_sup_median"] = float(np.median(x))
            agg["breslow_within_0.15"] = float(np.mean(x <= 0.15))
    return agg, excl


def run_experiment(cfg: SimConfig, study="estimation", threads: int = 1, replications: int | None = None,
                   opts: SolverOptions | None = None, progress=None) -> ExperimentReport:
    """Run ``replications`` (default ``cfg.replications``) of one or more studies.

    ``study`` is a name from ``STUDIES`` or a sequence of them; shared
    quantities are computed once per replication.  Replications are
    distributed over ``threads`` worker processes and reduced in index order.
    """
    studies = (study,) if isinstance(study, str) else tuple(study)
    for s in studies:
        if s not in STUDIES:
            raise InvalidArgument(f"unknown study {s!r}; choose from {STUDIES}")
    if "cindex" in studies:
        raise InvalidArgument("the cindex study runs on a dataset; use run_cindex_study")
    R = cfg.replications if replications is None else replications
    t0 = time.perf_counter()
    if threads > 1:
        with ProcessPoolExecutor(threads) as pool:
            futs = [pool.submit(run_replication, cfg, r, studies, opts) for r in range(R)]
            records = []
            for f in futs:
                records.append(f.result())
                if progress:
                    progress(len(records), R)
    else:
        records = []
        for r in range(R):
            records.append(run_replication(cfg, r, studies, opts))
            if progress:
                progress(r + 1, R)
    agg, excl = aggregate(records, studies, cfg.seed)
    return ExperimentReport(cfg.to_dict(), studies, records, agg, excl, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# C-index study on a dataset

def screen_top(train: SurvivalDataset, k: int) -> np.ndarray:
    """Indices of the ``k`` features with the largest absolute Cox score at zero."""
    from .survival import gradient

    score = np.abs(gradient(train, np.zeros(train.p)))
    if k >= train.p:
        return np.arange(train.p)
    return np.sort(np.argsort(-score, kind="stable")[:k])


def cindex_replication(data: SurvivalDataset, rep: int, seed: int = 0, K: int = 4, rounds: int = 3,
                       top: int = 300, train_frac: float = 0.8, tuning: Tuning | None = None,
                       opts: SolverOptions | None = None) -> dict:
    tuning = tuning or Tuning()
    opts = opts or SolverOptions()
    rng = rep_rng(seed, rep)
    perm = rng.permutation(data.n)
    n_train = int(round(train_frac * data.n))
    n_train -= n_train % K
    train = data.subset(np.sort(perm[:n_train]))
    test = data.subset(np.sort(perm[n_train:]))
    cols = screen_top(train, top)
    tr, te = train.with_covariates(train.covariates[:, cols]), test.with_covariates(test.covariates[:, cols])
    rec = {"rep": rep}
    try:
        cohort = partition(tr, K, seed=rep, opts=opts)
        B = _B(tr)
        trace = gel_iterate(cohort, T=rounds, opts=opts, tuning=tuning)
        if trace.error is not None:
            raise trace.error
        full = fit_l1_cox(tr, tuning.full(tr.p, tr.n, B), opts=opts).beta
        local = [trace.iterates[0]] + [local_lasso(c.data, trace.lambdas[0], opts) for c in cohort.centers[1:]]
        lam_node = tuning.node(tr.p, cohort.m, B)
        avg_deb = np.mean([debiased_lasso(c.data, b, lam_node, opts) for c, b in zip(cohort.centers, local)], axis=0)
        for name, b in (("iterated", trace.final), ("full", full), ("one_center", trace.iterates[0]),
                        ("avg_debiased", avg_deb)):
            rec[f"cindex_{name}"] = c_index_ipw(tr, te, b)
        cohort.close()
    except FedCoxError as exc:
        rec["error"] = f"{type(exc).__name__}: {exc}"
    return rec


def run_cindex_study(data: SurvivalDataset, replications: int = 400, seed: int = 0, threads: int = 1,
                     **kwargs) -> ExperimentReport:
    t0 = time.perf_counter()
    if threads > 1:
        with ProcessPoolExecutor(threads) as pool:
            records = list(pool.map(cindex_replication, [data] * replications, range(replications),
                                    [seed] * replications, *[[v] * replications for v in kwargs.values()]))
    else:
        records = [cindex_replication(data, r, seed, **kwargs) for r in range(replications)]
    good = [r for r in records if "error" not in r]
    agg = {}
    for m in METHODS:
        x = np.array([r[f"cindex_{m}"] for r in good])
        if x.size:
            agg[f"cindex_{m}"] = float(x.mean())
            agg[f"cindex_{m}_se"] = float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else float("nan")
    config = {"n": data.n, "p": data.p, "seed": seed, "replications": replications, **{
        k: (v.to_dict() if hasattr(v, "to_dict") else v) for k, v in kwargs.items()}}
    return ExperimentReport(config, ("cindex",), records, agg, {"replication_errors": len(records) - len(good)},
                            time.perf_counter() - t0)
