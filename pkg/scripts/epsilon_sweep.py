#!/usr/bin/env python3
"""Sweep the label-confidence epsilon and record attack success per value.

For each epsilon and seed this trains one model from a shared base config
and appends a row to a summary CSV. The interesting curve is attack success
vs epsilon: low-confidence labels trade attack strength for stealth.

    python scripts/epsilon_sweep.py --config configs/undefended.ini \
        --epsilons 0.1 0.4 0.7 1.0 --seeds 1 2 3 --out runs/eps_sweep
"""
import argparse
import csv
import os
import time

from hasnets import harness
from hasnets.config import load_config


def sweep(args):
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for epsilon in args.epsilons:
        for seed in args.seeds:
            tag = f"eps{epsilon:g}_s{seed}"
            overrides = {
                ("poison", "epsilon"): str(epsilon),
                ("run", "seed"): str(seed),
                ("run", "out"): os.path.join(args.out, tag),
            }
            cfg = load_config(args.config, overrides)
            start = time.time()
            result = harness.run(cfg)
            summary = result.summary
            rows.append({
                "epsilon": epsilon,
                "seed": seed,
                "clean_accuracy": summary["clean_accuracy"],
                "asr": summary["asr"],
                "seconds": round(time.time() - start, 1),
            })
            print(f"{tag}: acc={summary['clean_accuracy']:.4f} "
                  f"asr={summary['asr']:.4f} ({rows[-1]['seconds']}s)")
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", required=True, help="base config file")
    parser.add_argument("--epsilons", type=float, nargs="+",
                        default=[0.1, 0.2, 0.4, 0.6, 0.8, 1.0])
    parser.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    parser.add_argument("--out", default="runs/eps_sweep")
    args = parser.parse_args()

    rows = sweep(args)
    table = os.path.join(args.out, "sweep.csv")
    with open(table, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    print(f"summary in {table}")


if __name__ == "__main__":
    main()
