#!/usr/bin/env python3
"""Compare apromfl against the local and fediot baselines over several seeds.

    python3 scripts/compare_methods.py [--seeds 0,1,2,3,4] [--out runs/compare]

Prints a per-seed table plus the mean differences in Acc@1 and R@1_s, and
leaves one run directory per (method, seed) under --out.
"""

import argparse
from dataclasses import replace
from pathlib import Path

import numpy as np

from apromfl.config import ExperimentConfig, finalize_config
from apromfl.harness import load_summary, run

METHODS = ("apromfl", "local", "fediot")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", default="0,1,2,3,4")
    parser.add_argument("--out", default="runs/compare")
    args = parser.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]

    table: dict[tuple[str, int], dict] = {}
    for seed in seeds:
        for method in METHODS:
            config = finalize_config(replace(ExperimentConfig(), method=method, seed=seed))
            out_dir = Path(args.out) / f"{method}_seed{seed}"
            run(config, out_dir)
            table[(method, seed)] = load_summary(out_dir)
        row = "  ".join(
            f"{m}: acc1={float(table[(m, seed)]['acc1_mean']):.4f} "
            f"r1s={float(table[(m, seed)]['r1_sum']):.4f}"
            for m in METHODS
        )
        print(f"seed {seed}  {row}", flush=True)

    def mean_diff(metric, a, b):
        return float(
            np.mean(
                [float(table[(a, s)][metric]) - float(table[(b, s)][metric]) for s in seeds]
            )
        )

    print(f"\nmean Acc@1  (apromfl - local):  {100 * mean_diff('acc1_mean', 'apromfl', 'local'):+.2f}pp")
    print(f"mean R@1_s (apromfl - local):  {100 * mean_diff('r1_sum', 'apromfl', 'local'):+.2f}pp")
    print(f"mean R@1_s (apromfl - fediot): {100 * mean_diff('r1_sum', 'apromfl', 'fediot'):+.2f}pp")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
