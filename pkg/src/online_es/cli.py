"""Command-line front end.

    online-es train --config run.cfg --seed 0 --out run.csv
    online-es sweep-k --config run.cfg --seed 0 --k-list 100,400,2000
    online-es variance --config var.cfg --seed 0 --mc 200000
    online-es check-theorem2 --spec spec.txt --window 2 [--mc 100000 --seed 0]
    online-es gen-linear-spec --horizon 8 --dim 3 --seed 0 --out spec.txt

Exit codes: 0 success, 2 configuration error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .estimators import EstimatorConfig
from .graphs import (DivergenceError, LinearGraph, LinearLossSpec, LorenzTestLoss, SpecFormatError,
                     episode_mean_loss, equal_window_sum_spec)
from .trainer import CSV_SCHEMA, NonFiniteUpdate, make_optimizer, train
from .variance import mc_total_variance, theorem2_condition, write_variance_csv

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


def _load_config(args, task) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = args.out
    if getattr(args, "mc", None) is not None:
        changes["mc"] = args.mc
    if getattr(args, "k_list", None):
        changes["k_list"] = tuple(int(k) for k in args.k_list.split(","))
    return cfg.replace(**changes).validate(task=task)


def _emit(text: str, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
        return
    tmp = Path(str(out) + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, out)


def run_training(cfg: ExperimentConfig, period: int | None = None):
    """Build graph, pool and optimizer from ``cfg`` and train; returns the log."""
    graph = cfg.build_graph()
    theta0 = cfg.theta0(graph)
    est = EstimatorConfig(cfg.estimator, cfg.sigma, cfg.window, period if period is not None else cfg.period)
    pool = est.make_pool(graph, cfg.n_workers, theta0, cfg.seed)
    opt = make_optimizer(cfg.optimizer, cfg.lr, cfg.lr_schedule)
    train_loss = (lambda th: episode_mean_loss(graph, th)) if cfg.train_loss else None
    test_loss = None
    if cfg.test_samples:
        test_seed = cfg.test_seed if cfg.test_seed is not None else cfg.seed
        test_loss = LorenzTestLoss(graph, cfg.test_samples, test_seed)
    _, log = train(pool, opt, cfg.num_updates, theta0, train_loss=train_loss, test_loss=test_loss,
                   eval_every=cfg.eval_every, keep_theta=True)
    log.log_theta = cfg.log_theta
    return log


def cmd_train(args) -> int:
    cfg = _load_config(args, "train")
    log = run_training(cfg)
    _emit(log.to_csv(), cfg.out)
    return EXIT_OK


def cmd_sweep_k(args) -> int:
    cfg = _load_config(args, "sweep-k").replace(estimator="gpes")
    buf = io.StringIO()
    buf.write(CSV_SCHEMA + " (long format, keyed by K)\n")
    w = csv.writer(buf, lineterminator="\n")
    header_done = False
    for K in cfg.k_list:
        log = run_training(cfg, period=K)
        if not header_done:
            w.writerow(["K"] + log.header())
            header_done = True
        for r in log.records:
            w.writerow([K] + log.row(r))
    if not header_done:
        w.writerow(["K"])
    _emit(buf.getvalue(), cfg.out)
    return EXIT_OK


def variance_estimators(cfg: ExperimentConfig) -> list[EstimatorConfig]:
    kinds = cfg.variance_estimators or (cfg.estimator,)
    out = []
    for kind in kinds:
        if kind == "gpes":
            periods = cfg.k_list or (cfg.period,)
            out += [EstimatorConfig("gpes", cfg.sigma, cfg.window, K) for K in periods]
        else:
            out.append(EstimatorConfig(kind, cfg.sigma, cfg.window))
    return out


def cmd_variance(args) -> int:
    cfg = _load_config(args, "variance")
    graph = cfg.build_graph()
    theta = cfg.theta0(graph)
    reports = [mc_total_variance(est, graph, theta, cfg.mc, cfg.seed, n_average=cfg.n_average)
               for est in variance_estimators(cfg)]
    buf = io.StringIO()
    write_variance_csv(buf, reports)
    _emit(buf.getvalue(), cfg.out)
    return EXIT_OK


def cmd_check_theorem2(args) -> int:
    spec = LinearLossSpec.load(args.spec)
    if args.window < 1 or spec.horizon % args.window:
        raise ConfigError([f"window {args.window} does not divide horizon {spec.horizon}"])
    lhs, rhs, holds = theorem2_condition(spec, args.window)
    line = f"lhs={lhs!r} rhs={rhs!r} holds={'true' if holds else 'false'}"
    if args.mc is not None:
        if args.seed is None:
            raise ConfigError(["--mc needs an explicit --seed"])
        if args.mc < 100:
            raise ConfigError([f"--mc must be >= 100, got {args.mc}"])
        graph = LinearGraph(spec)
        theta = np.zeros(spec.param_dim)
        n = spec.horizon // args.window
        nres = mc_total_variance(EstimatorConfig("nres", args.sigma, args.window), graph, theta, args.mc,
                                 args.seed, n_average=n)
        full = mc_total_variance(EstimatorConfig("fulles", args.sigma), graph, theta, args.mc, args.seed + 1)
        line += (f" nres_avg_mc={nres.mc_total_variance!r} nres_avg_stderr={nres.stderr!r}"
                 f" fulles_mc={full.mc_total_variance!r} fulles_stderr={full.stderr!r}")
    print(line)
    return EXIT_OK


def cmd_gen_linear_spec(args) -> int:
    if args.kind == "equal-window":
        if args.window is None:
            raise ConfigError(["--window is required for equal-window specs"])
        spec = equal_window_sum_spec(args.horizon, args.window, args.dim, args.seed)
    else:
        spec = LinearLossSpec.random(args.horizon, args.dim, args.seed)
    _emit(spec.to_text(), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="online-es", description="Online evolution-strategies experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, mc=False):
        sp.add_argument("--config", required=True, help="key = value config file")
        sp.add_argument("--seed", type=int, help="master seed (overrides config)")
        sp.add_argument("--out", help="output CSV path (default stdout)")
        if mc:
            sp.add_argument("--mc", type=int, help="Monte-Carlo sample count (overrides config)")

    sp = sub.add_parser("train", help="train with one estimator")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sweep-k", help="one GPES training run per noise period K")
    common(sp)
    sp.add_argument("--k-list", help="comma-separated K values (overrides config)")
    sp.set_defaults(func=cmd_sweep_k)

    sp = sub.add_parser("variance", help="closed-form and Monte-Carlo total variance")
    common(sp, mc=True)
    sp.add_argument("--k-list", help="comma-separated K values for gpes rows")
    sp.set_defaults(func=cmd_variance)

    sp = sub.add_parser("check-theorem2", help="check the NRES-vs-FullES window condition")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--window", type=int, required=True)
    sp.add_argument("--mc", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--sigma", type=float, default=1.0)
    sp.set_defaults(func=cmd_check_theorem2)

    sp = sub.add_parser("gen-linear-spec", help="write a seeded linear-loss spec")
    sp.add_argument("--horizon", type=int, required=True)
    sp.add_argument("--dim", type=int, required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--kind", choices=("random", "equal-window"), default="random")
    sp.add_argument("--window", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_gen_linear_spec)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(err, file=sys.stderr)
        return EXIT_CONFIG
    except SpecFormatError as err:
        print(f"bad spec file: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as err:
        print(f"cannot read input: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NonFiniteUpdate) as err:
        print(f"numerical divergence: {err}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
