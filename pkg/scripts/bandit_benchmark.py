#!/usr/bin/env python3
"""Treatment-assignment policy benchmark on Bernoulli bandits.

Compares uniform assignment, Thompson sampling, exploration sampling, and
expected-free-energy minimization on paired random environments. Smoke scale
by default; pass --full for the 300-run configuration.
"""

import argparse
import sys
import time

import numpy as np

from adaptex.cli import _BenchCell, _run_bench_cell

METRICS = ("identification_rate", "policy_regret", "average_regret", "exploitation_probability")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--full", action="store_true", help="300 runs per cell")
    parser.add_argument("--setup", default="B", choices=("A", "B"))
    parser.add_argument("--arms", type=int, default=10)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    runs = 300 if args.full else 30
    horizon = 500 if args.setup == "A" else 1000
    configs = [
        ("uniform", 0.0, 256),
        ("thompson", 0.0, 256),
        ("exploration", 0.0, 256),
        ("active-inference", 0.1, 64),
        ("active-inference", 0.2, 64),
        ("active-inference", 0.3, 64),
    ]
    print(f"setup {args.setup}, k={args.arms}, horizon {horizon}, {runs} paired runs per policy")
    start = time.time()
    header = f"{'policy':22s}" + "".join(f"{m:>24s}" for m in METRICS)
    print(header)
    for name, gamma, mc in configs:
        cell = _BenchCell(
            setup=args.setup, k=args.arms, policy=name, gamma=gamma,
            horizon=horizon, runs=runs, seed=args.seed, mc_samples=mc,
        )
        _, metrics = _run_bench_cell(cell)
        label = name if name != "active-inference" else f"{name} (g={gamma})"
        row = f"{label:22s}"
        for m in METRICS:
            arr = np.asarray(metrics[m])
            row += f"{arr.mean():>16.4f} +-{1.96 * arr.std(ddof=1) / np.sqrt(len(arr)):>5.3f}"
        print(row)
    print(f"wall time: {time.time() - start:.0f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
