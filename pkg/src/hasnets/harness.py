"""Config-driven experiment pipeline.

A run builds its dataset, carves healing and test splits before any
poisoning, poisons the training split per the plan, trains with the chosen
trainer, evaluates clean accuracy and attack success, optionally screens
inputs with the entropy detector, and writes every artifact (materialized
config, report/timing/ledger CSVs, checkpoint, scan CSV) into one directory.

All randomness flows from the single run seed through named substreams.
"""
from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import attacks, metrics, nn, reporting, strip, training
from .config import save_config
from .data import LabeledDataset, SplitSpec, load_dataset, load_idx, split, synth_blobs
from .errors import ConfigurationError, DefenseCollapseError
from .rng import substream

ARCHITECTURES = {
    "desk_cnn": "conv:32x3x3;elu;maxpool:2;dropout:0.2;dense:{c};softmax",
    "fmnist_cnn": "conv:32x3x3;elu;conv:32x3x3;elu;maxpool:2;dropout:0.2;dense:{c};softmax",
    "mlp": "dense:128;relu;dropout:0.2;dense:{c};softmax",
    "linear": "dense:{c};softmax",
}


def architecture_spec(name, n_classes):
    """Named preset or an explicit semicolon layer spec."""
    if ";" in name:
        return name
    if name in ARCHITECTURES:
        return ARCHITECTURES[name].format(c=n_classes)
    raise ConfigurationError(f"unknown architecture {name!r}")


def child_seed(seed, *path):
    return int(substream(seed, *path).integers(0, 2 ** 63 - 1))


def build_dataset(cfg):
    data = cfg.data
    if data.source == "synth":
        return synth_blobs(data.synth_n, data.synth_classes, data.synth_hw,
                           seed=child_seed(cfg.run.seed, "data"))
    if data.source == "idx":
        return load_idx(data.idx_images, data.idx_labels)
    return load_dataset(data.cache_path)


def build_splits(cfg, dataset):
    spec = SplitSpec(cfg.split.healing_fraction, cfg.split.test_count,
                     seed=child_seed(cfg.run.seed, "split"))
    return split(dataset, spec)


def _load_or_default(name, image_shape, which):
    if name == "default":
        outer, inner = attacks.default_triggers(image_shape)
        return outer if which == "outer" else inner
    return attacks.load_trigger(name)


def build_attack(cfg, image_shape):
    """Resolve the poison plan plus the trigger/target used at eval time.

    Returns (plan, eval_trigger, eval_target); all None when mode is none.
    The nested-trigger mode evaluates with the inner trigger and its own
    target class, since that is the pair meant to survive trigger removal.
    """
    p = cfg.poison
    if p.mode == "none":
        return None, None, None
    if p.mode == "invisible":
        trig = attacks.NoiseTrigger(image_shape, amplitude=p.noise_amplitude,
                                    seed=child_seed(cfg.run.seed, "trigger"))
        plan = attacks.PoisonPlan(mode=p.mode, budget=p.budget, epsilon=p.epsilon,
                                  target_class=p.target_class, selection=p.selection,
                                  trigger=trig)
        return plan, trig, p.target_class
    outer = _load_or_default(p.trigger, image_shape, "outer")
    if p.mode == "epsilon2":
        inner = _load_or_default(p.trigger2, image_shape, "inner")
        plan = attacks.PoisonPlan(mode=p.mode, budget=p.budget, epsilon=p.epsilon,
                                  target_class=p.target_class,
                                  target_class_2=p.target_class_2,
                                  selection=p.selection, trigger=outer, trigger2=inner)
        return plan, inner, p.target_class_2
    plan = attacks.PoisonPlan(mode=p.mode, budget=p.budget, epsilon=p.epsilon,
                              target_class=p.target_class, selection=p.selection,
                              trigger=outer)
    return plan, outer, p.target_class


def build_model(cfg, image_shape, n_classes):
    spec = architecture_spec(cfg.model.architecture, n_classes)
    return nn.Model(spec, image_shape, rng=substream(cfg.run.seed, "init"))


@dataclass
class RunResult:
    out_dir: str
    summary: dict
    rows: list
    snapshots: list = field(default_factory=list)
    strip_report: object = None
    model: object = None


def _gamma_means(snapshot, flags_by_id):
    flags = np.array([flags_by_id.get(int(i), False) for i in snapshot.ids])
    poisoned = snapshot.neg_gamma[flags]
    clean = snapshot.neg_gamma[~flags]
    return (float(poisoned.mean()) if len(poisoned) else float("nan"),
            float(clean.mean()) if len(clean) else float("nan"))


def run(cfg):
    """Execute the full pipeline described by ``cfg``; returns a RunResult."""
    out_dir = cfg.run.out
    os.makedirs(out_dir, exist_ok=True)
    seed = cfg.run.seed

    dataset = build_dataset(cfg)
    train, heal, test = build_splits(cfg, dataset)
    plan, eval_trigger, eval_target = build_attack(cfg, train.image_shape)

    if plan is not None:
        poisoned = attacks.apply_plan(train, plan, rng=substream(seed, "poison"))
        eval_poison = attacks.make_eval_poison_set(test, eval_trigger, eval_target)
    else:
        poisoned = train
        eval_poison = None

    model = build_model(cfg, train.image_shape, train.n_classes)
    optimizer = nn.make_optimizer(cfg.optimizer.kind, cfg.optimizer.learning_rate,
                                  cfg.optimizer.momentum)
    train_rng = substream(seed, "train")
    loss_kind = cfg.train.loss
    batch_size = cfg.optimizer.batch_size
    flags_by_id = {int(i): bool(f) for i, f in zip(poisoned.ids, poisoned.poison_flags)}
    baseline = cfg.eval.baseline_accuracy

    rows = []
    timing = []
    snapshots = []

    def measure(model_now):
        acc = metrics.compute_accuracy(model_now, test)
        asr = metrics.compute_asr(model_now, eval_poison) if eval_poison is not None else None
        return acc, asr

    if cfg.train.trainer == "hasnet":
        hcfg = training.HasNetConfig(
            s=cfg.hasnet.s, d=cfg.hasnet.d, tau=cfg.hasnet.tau,
            heal_epochs=cfg.hasnet.heal_epochs,
            max_iterations=cfg.hasnet.max_iterations, policy=cfg.hasnet.policy)

        def hook(iteration, model_now):
            acc, asr = measure(model_now)
            if cfg.hasnet.checkpoint_every and iteration % cfg.hasnet.checkpoint_every == 0:
                nn.save_model(model_now, os.path.join(out_dir, f"model_iter{iteration:03d}.hnm"))
            return {"clean_accuracy": acc, "asr": asr}

        try:
            snapshots = training.train_hasnet(
                model, poisoned, heal, hcfg, optimizer, loss_kind=loss_kind,
                batch_size=batch_size, rng=train_rng, eval_hook=hook)
        except DefenseCollapseError as exc:
            partial = getattr(exc, "snapshots", [])
            reporting.write_ledger(os.path.join(out_dir, "ledger.csv"), partial, flags_by_id)
            raise
        for snap in snapshots:
            gp, gc = _gamma_means(snap, flags_by_id)
            acc = snap.extras.get("clean_accuracy")
            rows.append({
                "kind": "iter", "iteration": snap.iteration,
                "clean_accuracy": acc, "asr": snap.extras.get("asr"),
                "selected_count": snap.selected_count,
                "retained_count": snap.retained_count,
                "removed_count": snap.removed_count,
                "mean_neg_gamma_poisoned": gp, "mean_neg_gamma_clean": gc,
                "rad": metrics.rad(acc, baseline) if baseline else None})
            timing.append((snap.iteration, snap.seconds))
        reporting.write_ledger(os.path.join(out_dir, "ledger.csv"), snapshots, flags_by_id)
    else:
        last_tick = time.perf_counter()

        def hook(epoch, model_now):
            nonlocal last_tick
            acc, asr = measure(model_now)
            rows.append({
                "kind": "iter", "iteration": epoch,
                "clean_accuracy": acc, "asr": asr,
                "selected_count": len(poisoned), "retained_count": len(poisoned),
                "removed_count": 0,
                "mean_neg_gamma_poisoned": None, "mean_neg_gamma_clean": None,
                "rad": metrics.rad(acc, baseline) if baseline else None})
            timing.append((epoch, time.perf_counter() - last_tick))
            last_tick = time.perf_counter()

        if cfg.train.trainer == "gradshape":
            gcfg = training.GradShapeConfig(cfg.gradshape.clip_norm,
                                            cfg.gradshape.noise_multiplier,
                                            cfg.gradshape.microbatch)
            training.train_gradshape(model, poisoned, cfg.train.epochs, gcfg,
                                     optimizer, loss_kind=loss_kind,
                                     batch_size=batch_size, rng=train_rng,
                                     noise_rng=substream(seed, "gradnoise"),
                                     epoch_hook=hook)
        else:
            training.train_undefended(model, poisoned, cfg.train.epochs, optimizer,
                                      loss_kind=loss_kind, batch_size=batch_size,
                                      rng=train_rng, epoch_hook=hook)

    accuracy, asr = measure(model)
    summary = {"clean_accuracy": accuracy, "asr": asr,
               "rad": metrics.rad(accuracy, baseline) if baseline else None}
    last_counts = (rows[-1]["selected_count"], rows[-1]["retained_count"],
                   rows[-1]["removed_count"]) if rows else (len(poisoned), len(poisoned), 0)
    rows.append({"kind": "summary",
                 "iteration": rows[-1]["iteration"] if rows else 0,
                 "clean_accuracy": accuracy, "asr": asr,
                 "selected_count": last_counts[0], "retained_count": last_counts[1],
                 "removed_count": last_counts[2],
                 "mean_neg_gamma_poisoned": rows[-1]["mean_neg_gamma_poisoned"] if rows else None,
                 "mean_neg_gamma_clean": rows[-1]["mean_neg_gamma_clean"] if rows else None,
                 "rad": summary["rad"]})

    strip_report = None
    if cfg.strip.enabled:
        strip_report = run_strip(cfg, model, heal, test, eval_trigger, eval_target)
        reporting.write_scan(os.path.join(out_dir, "strip.csv"), strip_report)
        summary["strip_far"] = strip_report.far
        summary["strip_frr"] = strip_report.frr
        summary["strip_threshold"] = strip_report.threshold

    save_config(cfg, os.path.join(out_dir, "config.ini"))
    reporting.write_report(os.path.join(out_dir, "report.csv"), rows)
    reporting.write_timing(os.path.join(out_dir, "timing.csv"), timing)
    nn.save_model(model, os.path.join(out_dir, "model.hnm"))

    return RunResult(out_dir=out_dir, summary=summary, rows=rows,
                     snapshots=snapshots, strip_report=strip_report, model=model)


def strip_sets(cfg, heal, test, eval_trigger, eval_target):
    """Carve the detector's inputs out of trusted and test data.

    Overlays come from the healing set (clean and disjoint from anything
    scanned).  Calibration, held-out clean, and to-be-poisoned blocks are
    disjoint slices of the test set.
    """
    s = cfg.strip
    if eval_trigger is None:
        raise ConfigurationError("the scan needs a poison mode to build stamped inputs")
    if s.calibration_count + s.clean_count >= len(test):
        raise ConfigurationError("test set too small for the configured scan")
    scfg = strip.StripConfig(k=s.k, frr=s.frr, blend=s.blend, overlays=heal.inputs)
    calibration = test.take(np.arange(s.calibration_count))
    clean_block = test.take(np.arange(s.calibration_count,
                                      s.calibration_count + s.clean_count))
    rest = test.take(np.arange(s.calibration_count + s.clean_count, len(test)))
    stamped_all = attacks.make_eval_poison_set(rest, eval_trigger, eval_target)
    if len(stamped_all) < s.poison_count:
        raise ConfigurationError(
            f"only {len(stamped_all)} non-target test samples left for the scan")
    stamped = stamped_all.take(np.arange(s.poison_count))
    scan_set = LabeledDataset(
        np.concatenate([clean_block.inputs, stamped.inputs]),
        np.concatenate([clean_block.labels, stamped.labels]),
        np.concatenate([clean_block.ids, stamped.ids]),
        np.concatenate([np.zeros(len(clean_block), dtype=bool),
                        np.ones(len(stamped), dtype=bool)]))
    return scfg, calibration, scan_set


def run_strip(cfg, model, heal, test, eval_trigger, eval_target):
    scfg, calibration, scan_set = strip_sets(cfg, heal, test, eval_trigger, eval_target)
    threshold = strip.calibrate_threshold(model, calibration, scfg, cfg.run.seed)
    return strip.scan(model, scan_set, threshold, scfg, cfg.run.seed)
