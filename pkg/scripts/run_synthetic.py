#!/usr/bin/env python3
"""Synthetic-data experiment: generate, fit every variant, predict, score.

Produces one run directory per (variant, seed) under --out and prints a
small RMSE table at the end.  Start from

    python scripts/run_synthetic.py --out runs/synth --iters 8000 --seeds 0..2
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
    ap.add_argument("--out", required=True)
    ap.add_argument("--iters", type=int, default=8000)
    ap.add_argument("--seeds", default="0..2")
    ap.add_argument("--variants", nargs="+",
                    default=["ffvd-m", "ffvd-c-m", "ffvd-p"])
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--n-particles", type=int, default=32)
    args = ap.parse_args()

    out = Path(args.out)
    synth = out / "data"
    sh(["synth", "--seed", args.data_seed, "--out", synth])

    lo, hi = (int(s) for s in args.seeds.split(".."))
    seeds = list(range(lo, hi + 1))
    results = {}
    for variant in args.variants:
        root = out / variant
        sh([
            "fit", "--variant", variant, "--data", synth / "data.csv",
            "--train-len", 120, "--d-x", 1, "--m", 20,
            "--iters", args.iters, "--n-samples", 50,
            "--step-size", 0.005, "--n-particles", args.n_particles,
            "--seeds", args.seeds, "--out", root,
        ])
        for seed in seeds:
            sh(["predict", "--run", root / f"seed-{seed}", "--seed", seed])
        sh(["eval", "--runs-root", root, "--seeds", args.seeds])
        metrics = json.loads((root / "metrics.json").read_text())
        results[variant] = (metrics["rmse_mean"], metrics["rmse_std"])
        sh(["normtest", "--run", root / f"seed-{seeds[0]}"])

    print("\n30-step test RMSE (mean +- std over seeds)")
    for variant, (mean, std) in results.items():
        print(f"  {variant:9s} {mean:.3f} +- {std:.3f}")


if __name__ == "__main__":
    main()
