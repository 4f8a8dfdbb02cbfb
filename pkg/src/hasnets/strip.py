"""Entropy-based input screening in the STRIP style.

Each input under test is blended with K clean overlay images; a model that
hosts an input-dominant trigger keeps predicting its target class on the
blends, so the mean prediction entropy stays unusually low.  The detection
threshold is a low quantile of entropy scores on clean inputs, giving a
bounded false-rejection rate by construction.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .nn import LOG_FLOOR
from .rng import substream


@dataclass
class StripConfig:
    k: int = 100
    frr: float = 0.01
    blend: float = 0.5
    overlays: np.ndarray = None

    def __post_init__(self):
        if self.k < 1:
            raise ConfigurationError("k must be at least 1")
        if not 0.0 < self.frr < 1.0:
            raise ConfigurationError(f"frr must be in (0, 1), got {self.frr}")
        if not 0.0 < self.blend < 1.0:
            raise ConfigurationError(f"blend weight must be in (0, 1), got {self.blend}")
        if self.overlays is None or len(self.overlays) < self.k:
            have = 0 if self.overlays is None else len(self.overlays)
            raise ConfigurationError(
                f"overlay pool of {have} images cannot supply k={self.k} draws")


def entropy_bits(probs):
    """Shannon entropy per row in bits, with probabilities floored at 1e-12."""
    rows = np.asarray(probs, dtype=np.float64)
    squeeze = rows.ndim == 1
    if squeeze:
        rows = rows[None]
    if rows.ndim != 2 or (rows.size and rows.min() < 0):
        raise ConfigurationError("entropy expects rows of probabilities")
    if np.abs(rows.sum(axis=1) - 1.0).max() > 1e-6:
        raise ConfigurationError("probability rows must sum to 1")
    h = -(rows * np.log2(np.clip(rows, LOG_FLOOR, 1.0))).sum(axis=1)
    return float(h[0]) if squeeze else h


def strip_score(model, image, cfg, seed):
    """Mean prediction entropy over K seeded blend perturbations of one input."""
    image = np.asarray(image, dtype=np.float64)
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(cfg.overlays), size=cfg.k, replace=False)
    blended = np.clip((1.0 - cfg.blend) * image[None] + cfg.blend * cfg.overlays[picks],
                      0.0, 1.0)
    probs = model.forward(blended, training=False)
    return float(entropy_bits(probs).mean())


def _per_input_seed(seed, sample_id):
    # stable per-input stream so scans parallelize and reorder safely
    return substream(seed, "strip", int(sample_id))


def score_dataset(model, dataset, cfg, seed):
    return np.array([
        strip_score(model, dataset.inputs[i], cfg, _per_input_seed(seed, dataset.ids[i]))
        for i in range(len(dataset))
    ])


def calibrate_threshold(model, calibration, cfg, seed):
    """Threshold at the frr-quantile of clean scores.

    With k = floor(frr * n) >= 1 the threshold is the k-th smallest clean
    score; strict flagging (score < t) then mis-flags fewer than k of n
    clean inputs.  When the set is too small to place the quantile the
    threshold drops just below the minimum so nothing clean is flagged.
    """
    if len(calibration) == 0:
        raise ConfigurationError("empty calibration set")
    if len(calibration) < 1.0 / cfg.frr:
        warnings.warn(f"calibration set of {len(calibration)} is small for "
                      f"frr={cfg.frr}; threshold will sit at the minimum score")
    scores = np.sort(score_dataset(model, calibration, cfg, seed))
    k = int(np.floor(cfg.frr * len(scores)))
    if k < 1:
        return float(scores[0] - 1e-9)
    return float(scores[k - 1])


@dataclass
class StripReport:
    ids: np.ndarray
    scores: np.ndarray
    flagged: np.ndarray
    poison_flags: np.ndarray
    threshold: float

    @property
    def far(self):
        """Fraction of poisoned inputs that slipped past the detector."""
        poisoned = self.poison_flags
        if not poisoned.any():
            return float("nan")
        return float((~self.flagged[poisoned]).mean())

    @property
    def frr(self):
        """Fraction of clean inputs wrongly flagged."""
        clean = ~self.poison_flags
        if not clean.any():
            return float("nan")
        return float(self.flagged[clean].mean())


def scan(model, dataset, threshold, cfg, seed):
    """Score every input and flag those strictly below the threshold.

    Ground-truth poison flags are only used to report FAR/FRR, never to
    decide flagging.
    """
    if len(dataset) == 0:
        raise ConfigurationError("empty scan set")
    scores = score_dataset(model, dataset, cfg, seed)
    flagged = scores < threshold
    return StripReport(ids=dataset.ids.copy(), scores=scores, flagged=flagged,
                       poison_flags=dataset.poison_flags.copy(),
                       threshold=float(threshold))
