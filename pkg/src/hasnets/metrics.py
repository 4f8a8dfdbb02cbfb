"""Evaluation metrics: accuracy, attack success rate, RAD, ranking AUC."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigurationError


def predict_classes(model, inputs, batch_size=256):
    """Argmax predictions; numpy argmax breaks ties toward the lowest index."""
    out = np.empty(len(inputs), dtype=np.int64)
    for start in range(0, len(inputs), batch_size):
        probs = model.forward(inputs[start:start + batch_size], training=False)
        out[start:start + len(probs)] = probs.argmax(axis=1)
    return out


def compute_accuracy(model, dataset, batch_size=256):
    """Fraction of samples whose prediction matches the label argmax."""
    if len(dataset) == 0:
        raise ConfigurationError("empty evaluation set")
    preds = predict_classes(model, dataset.inputs, batch_size)
    return float((preds == dataset.classes()).mean())


def compute_asr(model, eval_poison_set, batch_size=256):
    """Attack success rate: fraction of stamped inputs predicted as the target.

    The eval poison set labels every row with the attack target, so this is
    accuracy on that set.
    """
    return compute_accuracy(model, eval_poison_set, batch_size)


def rad(accuracy, baseline_accuracy):
    """Relative accuracy drop against an unpoisoned baseline."""
    if baseline_accuracy <= 0:
        raise ConfigurationError("baseline accuracy must be positive")
    return (baseline_accuracy - accuracy) / baseline_accuracy


def auc_score(scores, positives):
    """Rank AUC of scores as a detector of the positive mask (ties averaged)."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = len(positives) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ConfigurationError("AUC needs both positive and negative samples")
    ranks = rankdata(scores)
    return float((ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
