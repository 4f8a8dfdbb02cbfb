"""Backdoor poisoning: triggers, low-confidence labels, and poisoning plans.

Supported plan modes:
  conventional  stamp a patch trigger, relabel toward a target class
  epsilon       same machinery; the name marks runs that sweep the label
                confidence below 1.0
  epsilon2      two nested patch triggers and two target classes, with the
                budget split into three equal groups (inner, outer-half,
                union); inference-time evaluation uses the inner half alone
  invisible     additive bounded noise field instead of a visible patch
  all_trojan    every training sample stamped and relabeled

Poisoning never mutates its input dataset; it returns a new one with
poison_flags set on the touched rows.  Flags exist for evaluation only.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset, one_hot
from .errors import ConfigurationError, ParseError

EPSILON_RANGE = (0.1, 1.0)

PLAN_MODES = ("conventional", "epsilon", "epsilon2", "invisible", "all_trojan")
SELECTION_MODES = ("first_k", "seeded_random")


def distributed_label(target_row, epsilon, n_classes=None):
    """Soften a one-hot row: target entry becomes exactly epsilon, the rest
    share (1 - epsilon) / (N - 1) each.

    Equivalent closed form of Y_t * (eps*N - 1)/(N - 1) + (1 - eps)/(N - 1),
    written so the target entry is exact in floating point.
    """
    row = np.asarray(target_row, dtype=np.float64)
    if row.ndim != 1:
        raise ConfigurationError("target_row must be a single label row")
    if n_classes is None:
        n_classes = len(row)
    if len(row) != n_classes or n_classes < 2:
        raise ConfigurationError(f"expected a row of {n_classes} classes")
    hot = np.flatnonzero(row == 1.0)
    if len(hot) != 1 or row.sum() != 1.0:
        raise ConfigurationError("target_row must be one-hot")
    if not EPSILON_RANGE[0] <= epsilon <= EPSILON_RANGE[1]:
        raise ConfigurationError(
            f"epsilon must lie in [{EPSILON_RANGE[0]}, {EPSILON_RANGE[1]}], got {epsilon}")
    out = np.full(n_classes, (1.0 - epsilon) / (n_classes - 1), dtype=np.float64)
    out[hot[0]] = epsilon
    return out


class PatchTrigger:
    """Sparse pixel overwrite: cells (row, col, channel) set to fixed values."""

    kind = "patch"

    def __init__(self, cells, values):
        self.cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
        self.values = np.asarray(values, dtype=np.float64).reshape(-1)
        if len(self.cells) != len(self.values):
            raise ConfigurationError("one value per trigger cell required")
        if len(self.cells) == 0:
            raise ConfigurationError("patch trigger needs at least one cell")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ConfigurationError("trigger values must lie in [0, 1]")
        seen = {tuple(c) for c in self.cells.tolist()}
        if len(seen) != len(self.cells):
            raise ConfigurationError("duplicate trigger cells")

    def stamp(self, images):
        out = np.array(images, dtype=np.float64, copy=True)
        r, c, ch = self.cells[:, 0], self.cells[:, 1], self.cells[:, 2]
        if out.ndim == 3:
            out[r, c, ch] = self.values
        else:
            out[:, r, c, ch] = self.values
        return out

    def cell_map(self):
        return {tuple(c): v for c, v in zip(self.cells.tolist(), self.values.tolist())}


class NoiseTrigger:
    """Full-image additive field bounded by an amplitude; stamping clamps."""

    kind = "noise"

    def __init__(self, field_or_shape, amplitude=0.1, seed=None):
        self.amplitude = float(amplitude)
        if self.amplitude <= 0.0 or self.amplitude > 1.0:
            raise ConfigurationError(f"noise amplitude must be in (0, 1], got {amplitude}")
        if seed is not None:
            self.seed = int(seed)
            shape = tuple(int(d) for d in field_or_shape)
            rng = np.random.default_rng(self.seed)
            self.field = rng.uniform(-self.amplitude, self.amplitude, size=shape)
        else:
            self.seed = None
            self.field = np.asarray(field_or_shape, dtype=np.float64)
            if np.abs(self.field).max() > self.amplitude:
                raise ConfigurationError("noise field exceeds its amplitude bound")

    def stamp(self, images):
        return np.clip(np.asarray(images, dtype=np.float64) + self.field, 0.0, 1.0)


def stamp(images, trigger):
    """Apply a trigger to one image (HWC) or a batch (NHWC)."""
    arr = np.asarray(images)
    if arr.ndim not in (3, 4):
        raise ConfigurationError(f"expected HWC or NHWC images, got shape {arr.shape}")
    return trigger.stamp(arr)


def square_patch(image_shape, size=4, inset=1, value=1.0):
    """Solid square in the bottom-right corner, inset from the border."""
    h, w, c = image_shape
    r0, c0 = h - inset - size, w - inset - size
    if r0 < 0 or c0 < 0:
        raise ConfigurationError(f"patch of size {size} does not fit {h}x{w}")
    cells = [(r0 + i, c0 + j, ch) for i in range(size) for j in range(size)
             for ch in range(c)]
    return PatchTrigger(cells, [value] * len(cells))


def right_half_patch(patch):
    """Right half of a square patch (same rows, right half of the columns)."""
    cols = np.unique(patch.cells[:, 1])
    keep = set(cols[len(cols) // 2:].tolist())
    mask = np.array([c in keep for c in patch.cells[:, 1]])
    return PatchTrigger(patch.cells[mask], patch.values[mask])


def default_triggers(image_shape):
    """Desk defaults: 4x4 white square (outer) and its right 4x2 half (inner)."""
    z1 = square_patch(image_shape, size=4, inset=1, value=1.0)
    return z1, right_half_patch(z1)


def is_subtrigger(inner, outer):
    """True when inner's cells are a subset of outer's with equal values."""
    outer_map = outer.cell_map()
    return all(outer_map.get(tuple(c)) == v
               for c, v in zip(inner.cells.tolist(), inner.values.tolist()))


def union_trigger(a, b):
    merged = a.cell_map()
    for cell, v in b.cell_map().items():
        if cell in merged and merged[cell] != v:
            raise ConfigurationError(f"conflicting values at cell {cell}")
        merged[cell] = v
    cells = sorted(merged)
    return PatchTrigger(cells, [merged[c] for c in cells])


@dataclass
class PoisonPlan:
    mode: str
    budget: float = 0.01
    epsilon: float = 1.0
    target_class: int = 0
    target_class_2: int = 1
    selection: str = "first_k"
    trigger: object = None
    trigger2: object = None

    def __post_init__(self):
        if self.mode not in PLAN_MODES:
            raise ConfigurationError(f"unknown poison mode {self.mode!r}")
        if self.selection not in SELECTION_MODES:
            raise ConfigurationError(f"unknown selection mode {self.selection!r}")


def resolve_budget(budget, n):
    """A budget below 1 is a fraction of the set; otherwise a sample count."""
    if budget < 0:
        raise ConfigurationError("budget must be nonnegative")
    count = int(round(budget * n)) if 0 <= budget < 1 else int(budget)
    if count > n:
        raise ConfigurationError(f"budget {count} exceeds {n} training samples")
    return count


def _select_ids(train, count, selection, rng):
    ordered = np.sort(train.ids)
    if selection == "first_k":
        return ordered[:count]
    if rng is None:
        raise ConfigurationError("seeded_random selection needs an rng")
    return np.sort(rng.choice(ordered, size=count, replace=False))


def apply_plan(train, plan, rng=None):
    """Return a poisoned copy of the training set.

    Selected rows are stamped and relabeled with the plan's distributed
    label; every other row is bit-identical to the input.  all_trojan
    ignores the budget and touches every sample.
    """
    n = len(train)
    k = train.n_classes
    if plan.target_class < 0 or plan.target_class >= k:
        raise ConfigurationError(f"target class {plan.target_class} out of range")
    trigger = plan.trigger
    if trigger is None and plan.mode != "invisible":
        trigger, _ = default_triggers(train.image_shape)
    if plan.mode == "invisible" and trigger is None:
        raise ConfigurationError("invisible mode needs a noise trigger in the plan")

    inputs = train.inputs.copy()
    labels = train.labels.copy()
    flags = train.poison_flags.copy()

    if plan.mode == "all_trojan":
        chosen = np.sort(train.ids)
    else:
        chosen = _select_ids(train, resolve_budget(plan.budget, n), plan.selection, rng)

    if len(chosen) == 0:
        return LabeledDataset(inputs, labels, train.ids.copy(), flags)

    id_to_index = {int(s): i for i, s in enumerate(train.ids)}
    rows = np.array([id_to_index[int(s)] for s in chosen], dtype=np.int64)

    if plan.mode == "epsilon2":
        if plan.target_class == plan.target_class_2:
            raise ConfigurationError("epsilon2 needs two distinct target classes")
        if plan.target_class_2 < 0 or plan.target_class_2 >= k:
            raise ConfigurationError(f"target class {plan.target_class_2} out of range")
        z1, z2 = plan.trigger, plan.trigger2
        if z1 is None and z2 is None:
            z1, z2 = default_triggers(train.image_shape)
        elif z1 is None or z2 is None:
            raise ConfigurationError("epsilon2 needs both triggers or neither")
        if not is_subtrigger(z2, z1):
            raise ConfigurationError("epsilon2 needs the inner trigger nested in the outer")
        label_c1 = distributed_label(one_hot([plan.target_class], k)[0], plan.epsilon)
        label_c2 = distributed_label(one_hot([plan.target_class_2], k)[0], plan.epsilon)
        groups = np.array_split(rows, 3)
        for grp, trig, lab in zip(groups, (z1, z2, union_trigger(z1, z2)),
                                  (label_c1, label_c2, label_c1)):
            if len(grp):
                inputs[grp] = stamp(inputs[grp], trig)
                labels[grp] = lab
    else:
        label = distributed_label(one_hot([plan.target_class], k)[0], plan.epsilon)
        inputs[rows] = stamp(inputs[rows], trigger)
        labels[rows] = label

    flags[rows] = True
    return LabeledDataset(inputs, labels, train.ids.copy(), flags)


def make_eval_poison_set(test, trigger, target_class):
    """Stamped copies of every test sample whose true class is not the target,
    labeled one-hot target.  Attack success rate is plain accuracy on this set."""
    if len(test) == 0:
        raise ConfigurationError("empty test set")
    keep = test.classes() != target_class
    if not keep.any():
        raise ConfigurationError("every test sample already has the target class")
    images = stamp(test.inputs[keep], trigger)
    labels = one_hot(np.full(int(keep.sum()), target_class), test.n_classes)
    return LabeledDataset(images, labels, test.ids[keep].copy(),
                          np.ones(int(keep.sum()), dtype=bool))


def save_trigger(trigger, path):
    """Structured-text trigger file.

    Patch triggers list their cells inline; noise triggers save amplitude,
    seed and field shape so the field regenerates deterministically.
    """
    cp = configparser.ConfigParser()
    if trigger.kind == "patch":
        cells = " ".join(f"{r},{c},{ch}:{v:.17g}"
                         for (r, c, ch), v in zip(trigger.cells.tolist(),
                                                  trigger.values.tolist()))
        cp["trigger"] = {"kind": "patch", "cells": cells}
    elif trigger.kind == "noise":
        if trigger.seed is None:
            raise ConfigurationError("only seeded noise triggers can be saved")
        cp["trigger"] = {
            "kind": "noise",
            "amplitude": f"{trigger.amplitude:.17g}",
            "seed": str(trigger.seed),
            "shape": "x".join(str(d) for d in trigger.field.shape),
        }
    else:
        raise ConfigurationError(f"unknown trigger kind {trigger.kind!r}")
    with open(path, "w") as fh:
        cp.write(fh)


def load_trigger(path):
    cp = configparser.ConfigParser()
    with open(path) as fh:
        text = fh.read()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ParseError(f"bad trigger file: {exc}") from exc
    if "trigger" not in cp:
        raise ParseError("trigger file missing [trigger] section")
    sec = cp["trigger"]
    kind = sec.get("kind", "")
    if kind == "patch":
        cells, values = [], []
        for item in sec.get("cells", "").split():
            pos, _, val = item.partition(":")
            r, c, ch = (int(v) for v in pos.split(","))
            cells.append((r, c, ch))
            values.append(float(val))
        if not cells:
            raise ParseError("patch trigger file lists no cells")
        return PatchTrigger(cells, values)
    if kind == "noise":
        shape = tuple(int(d) for d in sec["shape"].split("x"))
        return NoiseTrigger(shape, amplitude=float(sec["amplitude"]),
                            seed=int(sec["seed"]))
    raise ParseError(f"unknown trigger kind {kind!r} in file")
