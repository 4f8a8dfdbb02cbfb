#!/usr/bin/env python3
"""Build a trigger file for use in [poison] trigger entries.

Examples:
    python scripts/make_trigger.py patch --hw 16 --size 6 --inset 1 out.ini
    python scripts/make_trigger.py noise --hw 16 --amplitude 0.1 --seed 7 out.ini
"""
import argparse

from hasnets import attacks


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="kind", required=True)

    p = sub.add_parser("patch", help="solid square in the bottom-right corner")
    p.add_argument("out")
    p.add_argument("--hw", type=int, default=16, help="image height and width")
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--size", type=int, default=4)
    p.add_argument("--inset", type=int, default=1, help="gap to the border")
    p.add_argument("--value", type=float, default=1.0)

    p = sub.add_parser("noise", help="seeded full-image additive field")
    p.add_argument("out")
    p.add_argument("--hw", type=int, default=16)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--amplitude", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)

    args = parser.parse_args()
    shape = (args.hw, args.hw, args.channels)
    if args.kind == "patch":
        trigger = attacks.square_patch(shape, size=args.size, inset=args.inset,
                                       value=args.value)
        detail = f"{len(trigger.cells)} cells"
    else:
        trigger = attacks.NoiseTrigger(shape, amplitude=args.amplitude,
                                       seed=args.seed)
        detail = f"amplitude {args.amplitude}, seed {args.seed}"
    attacks.save_trigger(trigger, args.out)
    print(f"wrote {args.kind} trigger ({detail}) to {args.out}")


if __name__ == "__main__":
    main()
