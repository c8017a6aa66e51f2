"""Closed-form vs Monte-Carlo total variance across noise periods.

    python3 scripts/variance_sweep.py --horizon 8 --dim 3 --seed 0 --mc 100000

For each window size that divides the horizon, sweeps every noise period
K that is a multiple of it, prints both variances and flags the period with
the smallest Monte-Carlo value (expected: K = T).
"""

import argparse
import sys

import numpy as np

from online_es.estimators import EstimatorConfig
from online_es.graphs import LinearGraph, LinearLossSpec
from online_es.variance import mc_total_variance, write_variance_csv


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--horizon", type=int, default=8)
    p.add_argument("--dim", type=int, default=3)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--mc", type=int, default=100_000)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--spec", help="load a spec file instead of generating one")
    args = p.parse_args(argv)

    spec = LinearLossSpec.load(args.spec) if args.spec else LinearLossSpec.random(args.horizon, args.dim, args.seed)
    graph = LinearGraph(spec)
    T = spec.horizon
    theta = np.zeros(spec.param_dim)
    reports = []
    for W in (w for w in range(1, T + 1) if T % w == 0):
        rows = []
        for K in range(W, T + 1, W):
            est = EstimatorConfig("gpes", args.sigma, W, K)
            rows.append(mc_total_variance(est, graph, theta, args.mc, args.seed))
        best = min(rows, key=lambda r: r.mc_total_variance)
        for r in rows:
            mark = "  <- min" if r is best else ""
            print(f"W={W:<3} K={r.period:<3} closed={r.closed_form:10.4f}  mc={r.mc_total_variance:10.4f} "
                  f"+- {r.stderr:.4f}{mark}", file=sys.stderr)
        reports += rows
    write_variance_csv(sys.stdout, reports)


if __name__ == "__main__":
    main()
