"""Command line interface.

Subcommands: run, train, poison, eval, strip-scan, report.  Every data
subcommand accepts --config/--seed/--out; --out beats the HNF_OUT
environment variable, which beats the config's [run] out entry.

Exit codes: 0 success, 2 configuration or parse problem, 3 defense
collapse, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

from . import attacks, harness, metrics, nn, reporting
from .config import load_config, save_config
from .data import save_dataset
from .errors import (ConfigurationError, DefenseCollapseError, HasNetsError,
                     NumericError, ParseError)
from .rng import substream

log = logging.getLogger("hasnets")


def _base_parser():
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument("--config", help="path to an INI config file")
    parser.add_argument("--seed", type=int, help="override [run] seed")
    parser.add_argument("--out", help="override the output directory")
    return parser


def _load(args, force=None):
    overrides = {}
    if args.seed is not None:
        overrides[("run", "seed")] = str(args.seed)
    env_out = os.environ.get("HNF_OUT")
    if env_out:
        overrides[("run", "out")] = env_out
    if args.out:
        overrides[("run", "out")] = args.out
    for key, value in (force or {}).items():
        overrides[key] = value
    return load_config(args.config, overrides)


def _cmd_run(args):
    cfg = _load(args)
    result = harness.run(cfg)
    _print_summary(result.summary, result.out_dir)
    return 0


def _cmd_train(args):
    cfg = _load(args, force={("strip", "enabled"): "false"})
    result = harness.run(cfg)
    _print_summary(result.summary, result.out_dir)
    return 0


def _print_summary(summary, out_dir):
    parts = [f"clean_accuracy={summary['clean_accuracy']:.4f}"]
    if summary.get("asr") is not None:
        parts.append(f"asr={summary['asr']:.4f}")
    if summary.get("rad") is not None:
        parts.append(f"rad={summary['rad']:.4f}")
    if "strip_far" in summary:
        parts.append(f"strip_far={summary['strip_far']:.4f}")
        parts.append(f"strip_frr={summary['strip_frr']:.4f}")
    print(" ".join(parts))
    print(f"artifacts in {out_dir}")


def _cmd_poison(args):
    force = {}
    if args.plan:
        force[("poison", "mode")] = args.plan
    cfg = _load(args, force=force)
    if cfg.poison.mode == "none":
        raise ConfigurationError("poison mode is none; nothing to do")
    out_dir = cfg.run.out
    os.makedirs(out_dir, exist_ok=True)
    dataset = harness.build_dataset(cfg)
    train, heal, test = harness.build_splits(cfg, dataset)
    plan, _, _ = harness.build_attack(cfg, train.image_shape)
    poisoned = attacks.apply_plan(train, plan, rng=substream(cfg.run.seed, "poison"))
    save_dataset(poisoned, os.path.join(out_dir, "poisoned.hnd"))
    with open(os.path.join(out_dir, "poison_flags.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("id", "poison_flag"))
        for sample_id, flag in zip(poisoned.ids, poisoned.poison_flags):
            writer.writerow((sample_id, int(flag)))
    save_config(cfg, os.path.join(out_dir, "config.ini"))
    flagged = int(poisoned.poison_flags.sum())
    print(f"poisoned {flagged} of {len(poisoned)} training samples "
          f"({flagged / len(poisoned):.2%}); cache in {out_dir}")
    return 0


def _rebuild_for_checkpoint(cfg):
    dataset = harness.build_dataset(cfg)
    train, heal, test = harness.build_splits(cfg, dataset)
    plan, eval_trigger, eval_target = harness.build_attack(cfg, train.image_shape)
    return heal, test, eval_trigger, eval_target


def _cmd_eval(args):
    cfg = _load(args)
    model = nn.load_model(args.checkpoint)
    heal, test, eval_trigger, eval_target = _rebuild_for_checkpoint(cfg)
    accuracy = metrics.compute_accuracy(model, test)
    line = f"clean_accuracy={accuracy:.4f}"
    if eval_trigger is not None:
        eval_set = attacks.make_eval_poison_set(test, eval_trigger, eval_target)
        line += f" asr={metrics.compute_asr(model, eval_set):.4f}"
    if cfg.eval.baseline_accuracy:
        line += f" rad={metrics.rad(accuracy, cfg.eval.baseline_accuracy):.4f}"
    print(line)
    return 0


def _cmd_strip_scan(args):
    cfg = _load(args)
    model = nn.load_model(args.checkpoint)
    heal, test, eval_trigger, eval_target = _rebuild_for_checkpoint(cfg)
    report = harness.run_strip(cfg, model, heal, test, eval_trigger, eval_target)
    out_dir = cfg.run.out
    os.makedirs(out_dir, exist_ok=True)
    reporting.write_scan(os.path.join(out_dir, "strip.csv"), report)
    print(f"threshold={report.threshold:.4f} far={report.far:.4f} frr={report.frr:.4f}")
    print(f"scan written to {os.path.join(out_dir, 'strip.csv')}")
    return 0


def _cmd_report(args):
    rows = reporting.merge_reports(args.inputs)
    reporting.write_merged(args.out, rows)
    print(f"merged {len(args.inputs)} reports ({len(rows) - 1} rows) into {args.out}")
    return 0


def build_parser():
    base = _base_parser()
    parser = argparse.ArgumentParser(
        prog="hasnets",
        description="Backdoor attacks, a heal-and-select defense, and an "
                    "entropy detector on a small numpy network stack.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("run", parents=[base],
                   help="full pipeline: poison, train, evaluate, scan").set_defaults(fn=_cmd_run)
    sub.add_parser("train", parents=[base],
                   help="pipeline without the detector scan").set_defaults(fn=_cmd_train)

    p = sub.add_parser("poison", parents=[base],
                       help="write a poisoned training cache and its flags")
    p.add_argument("--plan", help="override the poison mode")
    p.set_defaults(fn=_cmd_poison)

    p = sub.add_parser("eval", parents=[base],
                       help="accuracy and attack success of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("strip-scan", parents=[base],
                       help="calibrate the entropy detector and scan inputs")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=_cmd_strip_scan)

    p = sub.add_parser("report", help="merge run report CSVs into one table")
    p.add_argument("inputs", nargs="+", help="report.csv files to merge")
    p.add_argument("--out", default="merged.csv")
    p.set_defaults(fn=_cmd_report)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except DefenseCollapseError as exc:
        print(f"defense collapse: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except (ConfigurationError, ParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except HasNetsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
