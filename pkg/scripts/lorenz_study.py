"""Train every ES estimator on the Lorenz task and summarize convergence.

    python3 scripts/lorenz_study.py --seed 0 --out-dir runs/lorenz

Writes one training CSV per estimator plus ``summary.csv`` with the
final-quarter test loss and theta oscillation of each run.
"""

import argparse
import csv
import sys
from pathlib import Path

from online_es.cli import run_training
from online_es.config import ExperimentConfig
from online_es.trainer import oscillation

CONFIGS = Path(__file__).parent / "configs"

# (label, config file, overrides)
RUNS = [
    ("nres", "lorenz_nres.cfg", {}),
    ("pes_schedule", "lorenz_pes.cfg", {}),
    ("pes_constant", "lorenz_pes.cfg", {"lr_schedule": ""}),
    ("tes", "lorenz_tes.cfg", {}),
]


def tail_mean(values, tail=0.25):
    vals = [v for v in values if v == v]
    k = max(1, round(len(vals) * tail))
    return sum(vals[-k:]) / k


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", default="runs/lorenz")
    p.add_argument("--updates", type=int, help="override num_updates (e.g. for a quick look)")
    p.add_argument("--only", nargs="*", help="subset of run labels")
    args = p.parse_args(argv)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for label, cfg_file, changes in RUNS:
        if args.only and label not in args.only:
            continue
        cfg = ExperimentConfig.load(CONFIGS / cfg_file).replace(seed=args.seed, **changes)
        if args.updates is not None:
            cfg = cfg.replace(num_updates=args.updates)
        cfg.validate()
        print(f"{label}: {cfg.estimator} lr={cfg.lr} schedule={cfg.lr_schedule or '-'}", file=sys.stderr)
        log = run_training(cfg)
        (out / f"{label}.csv").write_text(log.to_csv())
        losses = log.losses("test_loss")
        summary.append({
            "run": label,
            "final_quarter_test_loss": tail_mean(list(losses)),
            "best_test_loss": float(min(v for v in losses if v == v)),
            "oscillation": oscillation(log.thetas()),
            "theta": " ".join(f"{v:.4f}" for v in log.records[-1].theta),
            "sequential_steps": log.records[-1].cum_sequential_steps,
        })
        print(f"  -> {summary[-1]}", file=sys.stderr)

    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(summary[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(summary)
    print((out / "summary.csv").read_text(), end="")


if __name__ == "__main__":
    main()
