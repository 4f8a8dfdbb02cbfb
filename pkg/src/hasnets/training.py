"""Trainers: the heal-and-select defense and the two baselines.

The defense alternates one epoch on the currently selected training samples
with a few healing epochs on a small trusted set, and watches how each
training sample's loss moves across the healing step.  Samples whose loss
rises under healing look like planted behavior; a smoothed score accumulates
that signal and two thresholds split the pool into selected (trained on),
retained (kept under watch), and removed (absorbing).

Baselines: plain minibatch SGD, and gradient shaping, which clips each
microbatch gradient to a norm bound and adds Gaussian noise before stepping.

Nothing in this module reads poison flags; they ride along in the datasets
for evaluation only.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (ConfigurationError, ConsistencyError, DefenseCollapseError,
                     DefenseCollapseWarning, NumericError)
from .nn import backward_and_step, flat_grads, loss_grad, loss_per_sample

STATUS_SELECTED, STATUS_RETAINED, STATUS_REMOVED = 0, 1, 2
STATUS_NAMES = {STATUS_SELECTED: "selected", STATUS_RETAINED: "retained",
                STATUS_REMOVED: "removed"}

POLICIES = ("policy1", "policy2")


@dataclass
class TrustLedger:
    """Per-sample trust state, keyed by ascending sample id.

    neg_gamma is the smoothed suspicion score (higher = more suspicious);
    l1/l2 hold the latest probe losses before and after healing.  Removal
    is absorbing: removed rows keep their last values and never return.
    """

    ids: np.ndarray
    neg_gamma: np.ndarray
    l1: np.ndarray
    l2: np.ndarray
    status: np.ndarray

    @classmethod
    def for_ids(cls, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if len(np.unique(ids)) != len(ids):
            raise ConfigurationError("ledger ids must be unique")
        ids = np.sort(ids)
        n = len(ids)
        return cls(ids=ids,
                   neg_gamma=np.zeros(n),
                   l1=np.full(n, np.nan),
                   l2=np.full(n, np.nan),
                   status=np.full(n, STATUS_SELECTED, dtype=np.int8))

    def __len__(self):
        return len(self.ids)

    def active_mask(self):
        return self.status != STATUS_REMOVED

    def active_ids(self):
        return self.ids[self.active_mask()]


def iterate_batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_epoch(model, dataset, optimizer, loss_kind="cross-entropy",
                batch_size=64, rng=None):
    """One shuffled epoch of minibatch SGD; returns the mean training loss."""
    if len(dataset) == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    total = 0.0
    for idx in iterate_batches(len(dataset), batch_size, rng):
        loss = backward_and_step(model, dataset.inputs[idx], dataset.labels[idx],
                                 optimizer, loss_kind, rng)
        total += loss * len(idx)
    return total / len(dataset)


def probe_losses(model, dataset, loss_kind="cross-entropy", batch_size=256):
    """Per-sample losses in evaluation mode (no dropout, no updates).

    Returns (ids, losses) aligned and ordered by ascending id.
    """
    order = np.argsort(dataset.ids)
    losses = np.empty(len(dataset))
    for start in range(0, len(dataset), batch_size):
        idx = order[start:start + batch_size]
        probs = model.forward(dataset.inputs[idx], training=False)
        losses[start:start + len(idx)] = loss_per_sample(probs, dataset.labels[idx],
                                                         loss_kind)
    return dataset.ids[order], losses


def update_trust(ledger, ids, l1, l2, s):
    """Fold one healing round into the suspicion scores.

    new score = s * (l2 - l1) + (1 - s) * old score, applied to every
    non-removed row.  The probe must cover exactly the non-removed ids.
    """
    if not 0.0 < s <= 1.0:
        raise ConfigurationError(f"smoothing factor s must be in (0, 1], got {s}")
    active = ledger.active_mask()
    if not np.array_equal(np.asarray(ids, dtype=np.int64), ledger.ids[active]):
        raise ConsistencyError("probe ids do not match the non-removed ledger ids")
    ledger.neg_gamma[active] = s * (l2 - l1) + (1.0 - s) * ledger.neg_gamma[active]
    ledger.l1[active] = l1
    ledger.l2[active] = l2


def thresholds(ledger, d):
    """Selection thresholds over non-removed scores: m is the mean, m2 shifts
    toward the max by the drift weight d."""
    if not 0.0 <= d <= 1.0:
        raise ConfigurationError(f"drift weight d must be in [0, 1], got {d}")
    active = ledger.active_mask()
    if not active.any():
        raise DefenseCollapseError("all samples removed")
    g = ledger.neg_gamma[active]
    m = float(g.mean())
    m2 = float((1.0 - d) * m + d * g.max())
    return m, m2


def policy1_threshold(ledger):
    """Single-threshold variant: 0.9 * mean + 0.1 * max of active scores."""
    active = ledger.active_mask()
    if not active.any():
        raise DefenseCollapseError("all samples removed")
    g = ledger.neg_gamma[active]
    return float(0.9 * g.mean() + 0.1 * g.max())


def select(ledger, m, m2, tau, policy="policy2"):
    """Split non-removed samples and update their statuses in place.

    policy2: selected = score < m and l1 > tau; retained adds score < m2.
    policy1: one threshold (pass it as both m and m2); selected == retained.
    Both comparisons are strict, so an all-equal score vector selects nothing
    and warns.  Returns (selected_ids, retained_ids).
    """
    if policy not in POLICIES:
        raise ConfigurationError(f"unknown policy {policy!r}")
    if m > m2:
        raise ConfigurationError(f"m={m} must not exceed m2={m2}")
    active = ledger.active_mask()
    if not active.any():
        raise DefenseCollapseError("all samples removed")
    pass_tau = ledger.l1 > tau
    if policy == "policy1":
        sel_mask = active & (ledger.neg_gamma < m) & pass_tau
        ret_mask = sel_mask
    else:
        sel_mask = active & (ledger.neg_gamma < m) & pass_tau
        ret_mask = active & (ledger.neg_gamma < m2) & pass_tau
    ledger.status[active & ~ret_mask] = STATUS_REMOVED
    ledger.status[ret_mask & ~sel_mask] = STATUS_RETAINED
    ledger.status[sel_mask] = STATUS_SELECTED
    if not sel_mask.any():
        warnings.warn(DefenseCollapseWarning(
            "selected set is empty; next iteration trains on healing data only"))
    return ledger.ids[sel_mask], ledger.ids[ret_mask]


@dataclass
class HasNetConfig:
    s: float = 0.3
    d: float = 0.4
    tau: float = 1e-8
    heal_epochs: int = 2
    max_iterations: int = 15
    policy: str = "policy2"

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ConfigurationError("max_iterations must be at least 1")
        if self.heal_epochs < 1:
            raise ConfigurationError("heal_epochs must be at least 1")
        if self.policy not in POLICIES:
            raise ConfigurationError(f"unknown policy {self.policy!r}")
        if self.tau < 0:
            raise ConfigurationError("tau must be nonnegative")


@dataclass
class IterationSnapshot:
    """State captured at the end of one defense iteration (1-based index)."""

    iteration: int
    ids: np.ndarray
    neg_gamma: np.ndarray
    l1: np.ndarray
    l2: np.ndarray
    status: np.ndarray
    selected_count: int
    retained_count: int
    removed_count: int
    m: float
    m2: float
    seconds: float
    extras: dict = field(default_factory=dict)


def train_hasnet(model, train, heal, cfg, optimizer, *, loss_kind="cross-entropy",
                 batch_size=64, rng=None, eval_hook=None):
    """Run the heal-and-select defense for cfg.max_iterations iterations.

    Each iteration: train one epoch on the selected set (the full training
    set at first), probe per-sample losses, heal on the trusted set, probe
    again, fold the loss movement into the suspicion scores, then re-split
    the pool.  Returns the list of per-iteration snapshots; the final model
    state lives in ``model``.

    Raises DefenseCollapseError (with ``snapshots`` attached) if every
    sample gets removed.
    """
    if len(heal) == 0:
        raise ConfigurationError("healing set is empty")
    heal_ids = set(heal.ids.tolist())
    if heal_ids & set(train.ids.tolist()):
        raise ConfigurationError("healing set overlaps the training set")

    ledger = TrustLedger.for_ids(train.ids)
    ds_ids = ledger.ids.copy()
    dt_ids = ledger.ids.copy()
    snapshots = []

    for it in range(1, cfg.max_iterations + 1):
        started = time.perf_counter()
        try:
            if len(ds_ids):
                train_epoch(model, train.subset_by_ids(ds_ids), optimizer,
                            loss_kind, batch_size, rng)
            watched = train.subset_by_ids(dt_ids)
            ids1, l1 = probe_losses(model, watched, loss_kind)
            for _ in range(cfg.heal_epochs):
                train_epoch(model, heal, optimizer, loss_kind, batch_size, rng)
            ids2, l2 = probe_losses(model, watched, loss_kind)
            if not np.array_equal(ids1, ids2):
                raise ConsistencyError("probe id sets diverged within an iteration")
            update_trust(ledger, ids1, l1, l2, cfg.s)
            if cfg.policy == "policy1":
                m = m2 = policy1_threshold(ledger)
            else:
                m, m2 = thresholds(ledger, cfg.d)
            ds_ids, dt_ids = select(ledger, m, m2, cfg.tau, cfg.policy)
        except NumericError as exc:
            raise NumericError(f"iteration {it}: {exc}") from exc

        snap = IterationSnapshot(
            iteration=it,
            ids=ledger.ids.copy(),
            neg_gamma=ledger.neg_gamma.copy(),
            l1=ledger.l1.copy(),
            l2=ledger.l2.copy(),
            status=ledger.status.copy(),
            selected_count=len(ds_ids),
            retained_count=len(dt_ids),
            removed_count=int((ledger.status == STATUS_REMOVED).sum()),
            m=m, m2=m2,
            seconds=time.perf_counter() - started)
        if eval_hook is not None:
            snap.extras = eval_hook(it, model)
        snapshots.append(snap)

        if len(dt_ids) == 0:
            err = DefenseCollapseError(f"iteration {it}: all samples removed")
            err.snapshots = snapshots
            raise err
    return snapshots


def train_undefended(model, train, epochs, optimizer, *, loss_kind="cross-entropy",
                     batch_size=64, rng=None, epoch_hook=None):
    """Plain minibatch training; returns the per-epoch mean losses.

    Zero epochs is a legal no-op that leaves the model untouched.
    """
    if epochs < 0:
        raise ConfigurationError("epochs must be nonnegative")
    losses = []
    for ep in range(1, epochs + 1):
        losses.append(train_epoch(model, train, optimizer, loss_kind, batch_size, rng))
        if epoch_hook is not None:
            epoch_hook(ep, model)
    return losses


@dataclass
class GradShapeConfig:
    clip_norm: float = 4.0
    noise_multiplier: float = 0.01
    microbatch: int = 1

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ConfigurationError("clip_norm must be positive")
        if self.noise_multiplier < 0:
            raise ConfigurationError("noise_multiplier must be nonnegative")
        if self.microbatch < 1:
            raise ConfigurationError("microbatch must be at least 1")


def clip_to_norm(flat, clip_norm):
    """Scale a flat gradient by min(1, clip_norm / ||g||2)."""
    norm = float(np.sqrt(np.sum(flat ** 2)))
    if norm <= clip_norm or norm == 0.0:
        return flat
    return flat * (clip_norm / norm)


def _scatter_flat(model, flat):
    offset = 0
    for p in model.parameters:
        p.grad = flat[offset:offset + p.size].reshape(p.value.shape)
        offset += p.size


def train_gradshape(model, train, epochs, gcfg, optimizer, *,
                    loss_kind="cross-entropy", batch_size=64, rng=None,
                    noise_rng=None, epoch_hook=None):
    """Gradient-shaped training in the differentially-private SGD style.

    Per batch: split into microbatches, clip each microbatch's summed-loss
    gradient to gcfg.clip_norm, add per-coordinate Gaussian noise with
    standard deviation noise_multiplier * clip_norm to the clipped sum,
    divide by the batch size, and step.  Returns per-epoch mean losses.
    """
    if epochs < 0:
        raise ConfigurationError("epochs must be nonnegative")
    if batch_size % gcfg.microbatch != 0:
        raise ConfigurationError(
            f"microbatch {gcfg.microbatch} must divide batch size {batch_size}")
    if gcfg.noise_multiplier > 0 and noise_rng is None:
        raise ConfigurationError("gradient noise needs a dedicated rng")

    n_flat = model.n_params
    epoch_losses = []
    for ep in range(1, epochs + 1):
        total_loss = 0.0
        for idx in iterate_batches(len(train), batch_size, rng):
            summed = np.zeros(n_flat)
            for start in range(0, len(idx), gcfg.microbatch):
                chunk = idx[start:start + gcfg.microbatch]
                probs = model.forward(train.inputs[chunk], training=True, rng=rng)
                total_loss += float(
                    loss_per_sample(probs, train.labels[chunk], loss_kind).sum())
                model.zero_grad()
                model.backward(loss_grad(probs, train.labels[chunk], loss_kind))
                summed += clip_to_norm(flat_grads(model), gcfg.clip_norm)
            if gcfg.noise_multiplier > 0:
                summed += noise_rng.normal(
                    0.0, gcfg.noise_multiplier * gcfg.clip_norm, size=n_flat)
            _scatter_flat(model, summed / len(idx))
            optimizer.step(model.parameters)
        epoch_losses.append(total_loss / len(train))
        if epoch_hook is not None:
            epoch_hook(ep, model)
    return epoch_losses
