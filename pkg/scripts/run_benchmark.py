#!/usr/bin/env python3
"""System-identification benchmark experiment on a local dataset CSV.

Uses the standard settings (d_x = 4, M = 100, 50k iterations, 100 retained
samples, 30-step test RMSE over several seeds).  Datasets are not bundled;
point --data at a CSV with header y0,a0, e.g.

    python scripts/run_benchmark.py --data data/furnace.csv --train-len 150 \\
        --variant ffvd-c-m --out runs/furnace --seeds 1..5
"""

import argparse
import json
import sys
from pathlib import Path

from ffvd.cli import main as ffvd_main


def sh(args):
    rc = ffvd_main([str(a) for a in args])
    if rc != 0:
        sys.exit(rc)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", required=True)
    ap.add_argument("--train-len", type=int, required=True)
    ap.add_argument("--variant", default="ffvd-c-m",
                    choices=["ffvd-m", "ffvd-c-m", "ffvd-p"])
    ap.add_argument("--out", required=True)
    ap.add_argument("--seeds", default="1..5")
    ap.add_argument("--iters", type=int, default=50_000)
    ap.add_argument("--d-x", type=int, default=4)
    ap.add_argument("--m", type=int, default=100)
    ap.add_argument("--horizon", type=int, default=30)
    ap.add_argument("--shift-controls", action="store_true")
    args = ap.parse_args()

    root = Path(args.out)
    fit_args = [
        "fit", "--variant", args.variant, "--data", args.data,
        "--train-len", args.train_len, "--d-x", args.d_x, "--m", args.m,
        "--iters", args.iters, "--n-samples", 100,
        "--seeds", args.seeds, "--out", root,
    ]
    if args.shift_controls:
        fit_args.append("--shift-controls")
    sh(fit_args)

    lo, hi = (int(s) for s in args.seeds.split(".."))
    for seed in range(lo, hi + 1):
        sh([
            "predict", "--run", root / f"seed-{seed}",
            "--horizon", args.horizon, "--seed", seed,
        ])
    sh(["eval", "--runs-root", root, "--seeds", args.seeds])
    metrics = json.loads((root / "metrics.json").read_text())
    print(
        f"{args.variant} on {Path(args.data).name}: "
        f"{metrics['rmse_mean']:.3f} +- {metrics['rmse_std']:.3f} "
        f"({args.horizon}-step RMSE over seeds {args.seeds})"
    )


if __name__ == "__main__":
    main()
