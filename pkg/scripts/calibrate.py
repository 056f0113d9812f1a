"""Grid search over one penalty constant on a simulation design.

    python scripts/calibrate.py --design appendix --param c_node --values 1.0 1.1 1.2

Prints the headline aggregates for each value so the constant can be picked
by hand; nothing is written back into ``Tuning``.
"""

import argparse
from dataclasses import replace

from fedcox.cli import REPRODUCE
from fedcox.simulation import SimConfig, run_experiment
from fedcox.tuning import Tuning

STUDIES = ("estimation", "test_size", "test_power", "ci_coverage")
KEYS = ("median_err_t10", "median_err_full", "median_err_one_center", "median_err_avg_debiased",
        "size_iterated", "power_iterated", "power_full", "coverage_iterated", "median_width_iterated")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--design", choices=("appendix", "main"), default="appendix")
    ap.add_argument("--k", type=int, default=2)
    ap.add_argument("--param", required=True, choices=[f for f in Tuning.__dataclass_fields__ if f.startswith("c_")])
    ap.add_argument("--values", type=float, nargs="+", required=True)
    ap.add_argument("--replications", type=int, default=100)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--seed", type=int, default=2024)
    args = ap.parse_args()

    if args.design == "appendix":
        base = replace(SimConfig(), **REPRODUCE["appendix"][0], K=2, seed=args.seed)
    else:
        base = replace(SimConfig(), K=args.k, power_nu=0.15, seed=args.seed)
    print("value  " + "  ".join(k.replace("median_", "") for k in KEYS))
    for v in args.values:
        cfg = replace(base, tuning=replace(Tuning(), **{args.param: v}))
        rep = run_experiment(cfg, STUDIES, threads=args.threads, replications=args.replications)
        print(f"{v:<6g} " + "  ".join(f"{rep.aggregates[k]:.3f}" for k in KEYS))


if __name__ == "__main__":
    main()
