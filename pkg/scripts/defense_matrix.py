#!/usr/bin/env python3
"""Cross every attack mode with every trainer and tabulate the outcomes.

Produces one run directory per cell plus a combined table, so the headline
comparison (how much attack success each defense removes, and what it costs
in clean accuracy) comes out of a single command:

    python scripts/defense_matrix.py --out runs/matrix --seed 1
"""
import argparse
import csv
import os

from hasnets import harness
from hasnets.config import load_config

ATTACKS = {
    "conventional": {("poison", "mode"): "conventional",
                     ("poison", "epsilon"): "1.0"},
    "low_conf": {("poison", "mode"): "conventional",
                 ("poison", "epsilon"): "0.4"},
    "invisible": {("poison", "mode"): "invisible",
                  ("poison", "epsilon"): "1.0",
                  ("poison", "noise_amplitude"): "0.1"},
}

TRAINERS = {
    "undefended": {("train", "trainer"): "undefended"},
    "hasnet": {("train", "trainer"): "hasnet"},
    "gradshape": {("train", "trainer"): "gradshape",
                  ("optimizer", "batch_size"): "16",
                  ("gradshape", "noise_multiplier"): "1.0"},
}

BASE = {
    ("data", "synth_n"): "10000",
    ("data", "synth_hw"): "16",
    ("split", "healing_fraction"): "0.25",
    ("split", "test_count"): "2000",
    ("poison", "budget"): "0.01",
    ("train", "loss"): "squared-error",
    ("train", "epochs"): "20",
}


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="runs/matrix")
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--attacks", nargs="+", choices=sorted(ATTACKS),
                        default=sorted(ATTACKS))
    parser.add_argument("--trainers", nargs="+", choices=sorted(TRAINERS),
                        default=sorted(TRAINERS))
    args = parser.parse_args()

    os.makedirs(args.out, exist_ok=True)
    rows = []
    for attack in args.attacks:
        for trainer in args.trainers:
            tag = f"{attack}__{trainer}"
            overrides = dict(BASE)
            overrides.update(ATTACKS[attack])
            overrides.update(TRAINERS[trainer])
            overrides[("run", "seed")] = str(args.seed)
            overrides[("run", "out")] = os.path.join(args.out, tag)
            cfg = load_config(overrides=overrides)
            summary = harness.run(cfg).summary
            rows.append({"attack": attack, "trainer": trainer,
                         "clean_accuracy": summary["clean_accuracy"],
                         "asr": summary["asr"]})
            print(f"{tag}: acc={summary['clean_accuracy']:.4f} "
                  f"asr={summary['asr']:.4f}")

    table = os.path.join(args.out, "matrix.csv")
    with open(table, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    print(f"matrix in {table}")


if __name__ == "__main__":
    main()
