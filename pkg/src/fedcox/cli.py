"""``fedcox`` command-line entry point.

Exit codes: 0 success, 2 invalid input or configuration, 3 solver failure,
4 transport failure.  Every command writes a ``manifest.json`` next to its
outputs with a content hash of the inputs, so reruns can be checked.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import (
    ConvergenceError,
    DegenerateVarianceError,
    FedCoxError,
    InvalidArgument,
    ProtocolError,
    RoundFailure,
    UnboundedProblemError,
)
from .federation.cohort import gel_iterate, partition
from .hazard import breslow, kernel_hazard
from .inference import coordinate_test, infer_linear, trace_pair
from .io import load_dataset
from .simulation import STUDIES, SimConfig, generate_dataset, load_config, run_cindex_study, run_experiment
from .survival import center_covariates
from .tuning import Tuning, default_rounds

EXIT_OK, EXIT_INVALID, EXIT_SOLVER, EXIT_TRANSPORT = 0, 2, 3, 4

REPRODUCE = {
    # name: (config overrides, studies, K values)
    "fig1": ({"n": 1000, "p": 50, "replications": 400}, ("estimation",), (2, 4, 8)),
    "fig2": ({"n": 1000, "p": 50, "replications": 400}, ("test_size",), (2, 4, 8)),
    "fig3": ({"n": 1000, "p": 50, "replications": 400, "power_nu": 0.15}, ("test_power",), (2, 4, 8)),
    "fig4": ({"n": 1000, "p": 50, "replications": 400}, ("ci_coverage",), (2, 4, 8)),
    "appendix": ({"n": 240, "p": 300, "censor_scale": 1.0, "replications": 200, "power_nu": 0.5},
                 ("estimation", "test_size", "test_power", "ci_coverage"), (2,)),
}


class _Manifest:
    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.args = {k: v for k, v in vars(args).items() if k != "func"}
        self.hash = hashlib.sha256()
        self.outputs = []
        self.t0 = time.perf_counter()
        self.comm = None
        self.hash.update(json.dumps(self.args, sort_keys=True, default=str).encode())

    def add_input(self, path) -> None:
        if path is not None:
            self.hash.update(Path(path).read_bytes())

    def add_output(self, path) -> Path:
        self.outputs.append(str(path))
        return Path(path)

    def write(self, out_dir: Path) -> Path:
        body = {
            "command": self.command,
            "arguments": self.args,
            "config": self.args.get("config"),
            "seed": self.args.get("seed"),
            "input_sha256": self.hash.hexdigest(),
            "outputs": self.outputs,
            "wall_seconds": time.perf_counter() - self.t0,
            "comm": self.comm,
        }
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(body, indent=2, sort_keys=True, default=str))
        return path


def _parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--data", help="dataset path; omit to simulate from --n/--p/--nu-star")
    shared.add_argument("--format", choices=("csv", "dlbcl"), default="csv")
    shared.add_argument("--k", type=int, default=2, help="number of centers")
    shared.add_argument("--seed", type=int, default=0)
    shared.add_argument("--threads", type=int, default=1)
    shared.add_argument("--transport", choices=("inproc", "stream"), default="inproc")
    shared.add_argument("--out-dir", default="fedcox_out")
    shared.add_argument("--config", help="TOML/JSON simulation config (flags override it)")
    shared.add_argument("--n", type=int, default=1000, help="simulated sample size")
    shared.add_argument("--p", type=int, default=50, help="simulated dimension")
    shared.add_argument("--nu-star", type=float, default=0.0, help="simulated first coefficient")
    shared.add_argument("--censor-scale", type=float, default=3.0 / 7.0)
    shared.add_argument("--rounds", type=int, default=None, help="GEL rounds (default: from K)")
    shared.add_argument("--centering", choices=("global", "local", "none"), default=None,
                        help="subtract pooled means, per-center means, or nothing (default global)")
    shared.add_argument("--no-center", action="store_true", help="same as --centering none")

    ap = argparse.ArgumentParser(prog="fedcox", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", parents=[shared], help="run GEL iterations and write the trace")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("infer", parents=[shared], help="debiased CI for c'beta")
    p.add_argument("--c", default="e1", help="'eJ' (1-based unit vector) or comma-separated p-vector")
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("test", parents=[shared], help="decorrelated score test of beta_j = 0")
    p.add_argument("--coord", type=int, default=1, help="1-based coordinate")
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("hazard", parents=[shared], help="Breslow and kernel-smoothed baseline hazard")
    p.add_argument("--bandwidth", type=float, default=None)
    p.add_argument("--kernel", choices=("epanechnikov", "gaussian"), default="epanechnikov")
    p.add_argument("--grid", default=None, help="comma-separated grid for binned Breslow")
    p.set_defaults(func=cmd_hazard)

    p = sub.add_parser("simulate", parents=[shared], help="Monte-Carlo study from a config")
    p.add_argument("--study", action="append", choices=STUDIES, help="repeatable; default estimation")
    p.add_argument("--replications", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reproduce", parents=[shared], help="rerun a figure or table design")
    p.add_argument("name", choices=tuple(REPRODUCE) + ("table1",))
    p.add_argument("--replications", type=int, default=None)
    p.add_argument("--scale", type=float, default=1.0, help="multiplies the replication count")
    p.set_defaults(func=cmd_reproduce)
    return ap


# ---------------------------------------------------------------------------
# helpers

def _centering(args):
    return "none" if args.no_center else args.centering


def _sim_config(args) -> SimConfig:
    base = load_config(args.config) if args.config else SimConfig()
    over = {"K": args.k, "seed": args.seed, "transport": args.transport,
            "centering": _centering(args) or base.centering}
    if not args.config:
        over.update(n=args.n, p=args.p, nu_star=args.nu_star, censor_scale=args.censor_scale)
    if args.rounds is not None:
        over["rounds"] = args.rounds
    return replace(base, **over)


def _dataset(args, man: _Manifest):
    if args.data:
        try:
            data = load_dataset(args.data, args.format)
        except FileNotFoundError:
            raise InvalidArgument(f"cannot read dataset {args.data}: no such file") from None
        man.add_input(args.data)
    else:
        data = generate_dataset(_sim_config(args), 0)
    return center_covariates(data) if (_centering(args) or "global") == "global" else data


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fit(args, data, tuning: Tuning):
    cohort = partition(data, args.k, seed=args.seed, transport=args.transport,
                       centering="local" if _centering(args) == "local" else "none")
    T = args.rounds if args.rounds is not None else default_rounds(args.k)
    trace = gel_iterate(cohort, T=T, tuning=tuning)
    if trace.error is not None:
        cohort.close()
        raise trace.error
    return cohort, trace


def _B(data):
    return float(np.abs(data.covariates).max()) or 1.0


def _parse_c(spec: str, p: int) -> np.ndarray:
    spec = spec.strip()
    if spec.lower().startswith("e"):
        j = int(spec[1:])
        if not 1 <= j <= p:
            raise InvalidArgument(f"--c {spec}: index out of range for p={p}")
        c = np.zeros(p)
        c[j - 1] = 1.0
        return c
    c = np.array([float(v) for v in spec.split(",")])
    if c.size != p:
        raise InvalidArgument(f"--c has {c.size} entries, expected p={p}")
    return c


# ---------------------------------------------------------------------------
# commands

def cmd_estimate(args) -> int:
    man = _Manifest("estimate", args)
    data = _dataset(args, man)
    out = _out_dir(args)
    cohort, trace = _fit(args, data, Tuning())
    with cohort:
        path = man.add_output(out / "trace.csv")
        with path.open("w") as fh:
            fh.write("t,lambda,kkt," + ",".join(f"beta{j + 1}" for j in range(data.p)) + "\n")
            for t, b in enumerate(trace.iterates):
                lam = trace.lambdas[t] if t < len(trace.lambdas) else ""
                kkt = trace.kkt[t] if t < len(trace.kkt) else ""
                fh.write(f"{t},{lam!r},{kkt!r}," + ",".join(repr(float(v)) for v in b) + "\n")
        man.comm = cohort.comm_log.snapshot()
    man.write(out)
    print(f"wrote {path} ({trace.T + 1} iterates)")
    return EXIT_OK


def cmd_infer(args) -> int:
    man = _Manifest("infer", args)
    data = _dataset(args, man)
    out = _out_dir(args)
    if args.rounds is not None and args.rounds < 1:
        raise InvalidArgument("inference needs at least one GEL round")
    tuning = Tuning()
    cohort, trace = _fit(args, data, tuning)
    with cohort:
        c = _parse_c(args.c, data.p)
        bt, bh, gbar = trace_pair(trace)
        rep = infer_linear(cohort, bt, bh, c, args.alpha, tuning.omega(data.p, cohort.m, _B(data)), gbar,
                           target=args.c)
        man.comm = cohort.comm_log.snapshot()
    path = man.add_output(out / "inference.json")
    path.write_text(rep.to_json())
    man.write(out)
    print(rep.to_json())
    return EXIT_OK


def cmd_test(args) -> int:
    man = _Manifest("test", args)
    data = _dataset(args, man)
    out = _out_dir(args)
    if not 1 <= args.coord <= data.p:
        raise InvalidArgument(f"--coord {args.coord} out of range for p={data.p}")
    tuning = Tuning()
    cohort, trace = _fit(args, data, tuning)
    with cohort:
        bt, bh, gbar = trace_pair(trace)
        rep = coordinate_test(cohort, bt, bh, args.coord - 1, args.alpha, tuning.w(data.p, cohort.m, _B(data)),
                              gbar)
        man.comm = cohort.comm_log.snapshot()
    path = man.add_output(out / "test.json")
    path.write_text(rep.to_json())
    man.write(out)
    print(f"beta[{args.coord}] = 0: z = {rep.statistic:.4f}, p = {rep.p_value:.4g}, "
          f"{'reject' if rep.reject else 'do not reject'} at alpha = {args.alpha}")
    return EXIT_OK


def cmd_hazard(args) -> int:
    man = _Manifest("hazard", args)
    data = _dataset(args, man)
    out = _out_dir(args)
    cohort, trace = _fit(args, data, Tuning())
    with cohort:
        grid = None if args.grid is None else np.array([float(v) for v in args.grid.split(",")])
        L = breslow(cohort, trace.iterates[-2], grid=grid)
        curve = kernel_hazard(cohort, trace.iterates[-2], h=args.bandwidth, kernel=args.kernel)
        man.comm = cohort.comm_log.snapshot()
    L.to_csv(man.add_output(out / "breslow.csv"))
    curve.to_csv(man.add_output(out / "hazard.csv"))
    man.write(out)
    print(f"wrote {out / 'breslow.csv'} and {out / 'hazard.csv'} (bandwidth {curve.bandwidth:.4g})")
    return EXIT_OK


def _write_report(rep, out: Path, man: _Manifest, stem: str) -> None:
    rep.to_csv(man.add_output(out / f"{stem}_replications.csv"))
    rep.to_json(man.add_output(out / f"{stem}_aggregates.json"))
    for path in rep.to_tsv(out / f"{stem}_tsv"):
        man.add_output(path)


def _progress(done, total):
    if done == total or done % max(1, total // 10) == 0:
        print(f"  {done}/{total}", file=sys.stderr)


def cmd_simulate(args) -> int:
    man = _Manifest("simulate", args)
    man.add_input(args.config) if args.config else None
    cfg = _sim_config(args)
    out = _out_dir(args)
    rep = run_experiment(cfg, tuple(args.study or ("estimation",)), threads=args.threads,
                         replications=args.replications, progress=_progress)
    _write_report(rep, out, man, "simulate")
    man.write(out)
    print(json.dumps(rep.aggregates, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_reproduce(args) -> int:
    man = _Manifest("reproduce", args)
    out = _out_dir(args)
    if args.name == "table1":
        if not args.data:
            raise InvalidArgument("table1 needs the DLBCL expression file via --data (use --format dlbcl)")
        man.add_input(args.data)
        data = load_dataset(args.data, args.format)
        R = args.replications or max(1, round(400 * args.scale))
        rep = run_cindex_study(data, replications=R, seed=args.seed, threads=args.threads, K=4, rounds=3)
        _write_report(rep, out, man, "table1")
        man.write(out)
        print(json.dumps(rep.aggregates, indent=2, sort_keys=True))
        return EXIT_OK
    over, studies, Ks = REPRODUCE[args.name]
    summary = {}
    for K in Ks:
        cfg = replace(SimConfig(), **over, K=K, seed=args.seed, transport=args.transport)
        if args.rounds is not None:
            cfg = replace(cfg, rounds=args.rounds)
        R = args.replications or max(1, round(cfg.replications * args.scale))
        print(f"{args.name}: K={K}, {R} replications", file=sys.stderr)
        rep = run_experiment(cfg, studies, threads=args.threads, replications=R, progress=_progress)
        _write_report(rep, out, man, f"{args.name}_K{K}")
        summary[f"K={K}"] = rep.aggregates
    if args.name == "appendix":
        _appendix_tables(summary["K=2"], out, man)
    man.write(out)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def _appendix_tables(agg: dict, out: Path, man: _Manifest) -> None:
    """The four appendix tables: estimation error, size, power, CI."""
    methods = ("iterated", "full", "one_center", "avg_debiased")
    est = {"iterated": "err_t10", "full": "err_full", "one_center": "err_one_center",
           "avg_debiased": "err_avg_debiased"}
    tables = {
        "estimation_error": [(m, agg.get(f"median_{est[m]}"), agg.get(f"median_{est[m]}_se")) for m in methods],
        "size": [(m, agg.get(f"size_{m}"), agg.get(f"size_{m}_se")) for m in methods],
        "power": [(m, agg.get(f"power_{m}"), agg.get(f"power_{m}_se")) for m in methods],
        "ci": [(m, agg.get(f"coverage_{m}"), agg.get(f"median_width_{m}")) for m in methods],
    }
    heads = {"ci": "method,coverage,median_width"}
    for name, rows in tables.items():
        path = man.add_output(out / f"appendix_{name}.csv")
        with path.open("w") as fh:
            fh.write(heads.get(name, "method,value,se") + "\n")
            for r in rows:
                fh.write(",".join([r[0]] + ["" if v is None else repr(float(v)) for v in r[1:]]) + "\n")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.func(args)
    except (InvalidArgument, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"fedcox: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ConvergenceError, UnboundedProblemError, DegenerateVarianceError) as exc:
        print(f"fedcox: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (RoundFailure, ProtocolError) as exc:
        print(f"fedcox: transport failure: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except FedCoxError as exc:
        print(f"fedcox: error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
