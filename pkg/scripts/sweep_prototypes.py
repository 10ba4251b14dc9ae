#!/usr/bin/env python3
"""Sweep the global prototype count K (and optionally the completion
parameter O) on a fixed seed, mirroring the robustness analyses.

    python3 scripts/sweep_prototypes.py [--axis K] [--values 10,20,40,60,80]
"""

import argparse
from pathlib import Path

from apromfl.config import ExperimentConfig, finalize_config
from apromfl.harness import sweep


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--axis", default="K", choices=["K", "O", "alpha", "clients", "mapping_layers"])
    parser.add_argument("--values", default="10,20,40,60,80")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="runs/sweep")
    args = parser.parse_args()

    config = finalize_config(ExperimentConfig(seed=args.seed))
    values = [v for v in args.values.split(",") if v]
    out = sweep(config, args.axis, values, Path(args.out) / args.axis)
    print((out / "sweep.csv").read_text(), end="")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
