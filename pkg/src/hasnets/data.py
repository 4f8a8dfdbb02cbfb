"""Datasets: labeled image sets, IDX loading, synthetic blobs, splits, cache.

A LabeledDataset carries float64 images in [0, 1] (NHWC), soft label rows,
stable integer sample ids, and per-sample poison flags.  The flags exist for
evaluation and reporting only; training and defense code never reads them.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ConsistencyError, ParseError

DATASET_MAGIC = b"HND1"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    poison_flags: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.poison_flags = np.asarray(self.poison_flags, dtype=bool)
        n = len(self.inputs)
        if self.inputs.ndim != 4:
            raise ConfigurationError(f"inputs must be NHWC, got shape {self.inputs.shape}")
        if len(self.labels) != n or len(self.ids) != n or len(self.poison_flags) != n:
            raise ConfigurationError("inputs, labels, ids and flags must have equal length")
        if self.labels.ndim != 2:
            raise ConfigurationError("labels must be a 2-d array of soft rows")
        if n:
            if self.inputs.min() < 0.0 or self.inputs.max() > 1.0:
                raise ConfigurationError("inputs must lie in [0, 1]")
            if np.abs(self.labels.sum(axis=1) - 1.0).max() > 1e-6:
                raise ConfigurationError("label rows must sum to 1")
            if len(np.unique(self.ids)) != n:
                raise ConfigurationError("sample ids must be unique")

    def __len__(self):
        return len(self.inputs)

    @property
    def n_classes(self):
        return self.labels.shape[1]

    @property
    def image_shape(self):
        return self.inputs.shape[1:]

    def classes(self):
        """Hard class per sample (argmax of the label row)."""
        return self.labels.argmax(axis=1)

    def take(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.inputs[idx].copy(), self.labels[idx].copy(),
                              self.ids[idx].copy(), self.poison_flags[idx].copy())

    def subset_by_ids(self, wanted_ids):
        """Subset holding exactly ``wanted_ids``, ordered by ascending id."""
        wanted = np.sort(np.asarray(wanted_ids, dtype=np.int64))
        order = np.argsort(self.ids)
        pos = np.searchsorted(self.ids[order], wanted)
        if pos.size and (pos.max() >= len(self.ids) or
                         not np.array_equal(self.ids[order][pos], wanted)):
            missing = set(wanted.tolist()) - set(self.ids.tolist())
            raise ConsistencyError(f"ids not present in dataset: {sorted(missing)[:5]}")
        return self.take(order[pos])


def one_hot(classes, n_classes):
    classes = np.asarray(classes, dtype=np.int64)
    if classes.size and (classes.min() < 0 or classes.max() >= n_classes):
        raise ConfigurationError(f"class index out of range for {n_classes} classes")
    rows = np.zeros((len(classes), n_classes), dtype=np.float64)
    rows[np.arange(len(classes)), classes] = 1.0
    return rows


def _blob_grid(classes):
    # class locations as canvas fractions on a coarse grid, filled row-major;
    # the grid stays clear of the bottom-right corner so synthetic class
    # features never collide with patch triggers placed there
    rows = [0.2, 0.4, 0.6]
    cols = [0.2, 0.4, 0.6, 0.8]
    points = [(r, c) for r in rows for c in cols]
    if classes > len(points):
        raise ConfigurationError(f"synth_blobs supports at most {len(points)} classes")
    return np.array(points[:classes])


def synth_blobs(n, classes, hw, seed):
    """Balanced synthetic set: one gaussian blob per class location, two
    dimmer distractor blobs at random spots, and pixel noise.

    Sample i gets class i % classes, so small n still covers every class.
    The class blob is always the brightest, so the task is fully learnable,
    but the distractors and noise keep losses away from zero at desk scale,
    which matters for loss-movement defenses.  A linear probe still fits the
    training set easily.
    """
    if n < 1 or classes < 2 or hw < 8:
        raise ConfigurationError("synth_blobs needs n >= 1, classes >= 2, hw >= 8")
    rng = np.random.default_rng(seed)
    cls = np.arange(n, dtype=np.int64) % classes
    grid = _blob_grid(classes) * hw
    ys, xs = np.mgrid[0:hw, 0:hw].astype(np.float64)
    sigma = hw / 10.0

    def bump(cy, cx, amp, width):
        d2 = (ys[None] - cy[:, None, None]) ** 2 + (xs[None] - cx[:, None, None]) ** 2
        return amp[:, None, None] * np.exp(-d2 / (2.0 * width[:, None, None] ** 2))

    cy = grid[cls, 0] + rng.uniform(-1.0, 1.0, n)
    cx = grid[cls, 1] + rng.uniform(-1.0, 1.0, n)
    images = bump(cy, cx, rng.uniform(0.55, 1.0, n), sigma * rng.uniform(0.8, 1.2, n))
    for _ in range(2):
        dy = rng.uniform(0.15 * hw, 0.85 * hw, n)
        dx = rng.uniform(0.15 * hw, 0.85 * hw, n)
        images += bump(dy, dx, rng.uniform(0.15, 0.45, n),
                       sigma * rng.uniform(0.8, 1.2, n))
    images += rng.normal(0.0, 0.1, images.shape)
    images = np.clip(images, 0.0, 1.0)[..., None]
    return LabeledDataset(images, one_hot(cls, classes),
                          np.arange(n, dtype=np.int64), np.zeros(n, dtype=bool))


def _read_exact(fh, count, what):
    data = fh.read(count)
    if len(data) != count:
        raise ParseError(f"truncated {what}", offset=fh.tell())
    return data


def load_idx(images_path, labels_path, n_classes=None):
    """Read an IDX image/label file pair (big-endian, byte pixels).

    Pixels are scaled to [0, 1] by dividing by 255; labels become one-hot
    rows over ``n_classes`` (default: max label + 1).
    """
    with open(images_path, "rb") as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4, "image magic"))
        if magic != IDX_IMAGES_MAGIC:
            raise ParseError(f"bad image magic 0x{magic:08x}", offset=0)
        n, h, w = struct.unpack(">III", _read_exact(fh, 12, "image header"))
        raw = _read_exact(fh, n * h * w, "image data")
        if fh.read(1):
            raise ParseError("trailing bytes in image file", offset=fh.tell() - 1)
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, h, w, 1) / 255.0

    with open(labels_path, "rb") as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4, "label magic"))
        if magic != IDX_LABELS_MAGIC:
            raise ParseError(f"bad label magic 0x{magic:08x}", offset=0)
        (count,) = struct.unpack(">I", _read_exact(fh, 4, "label header"))
        if count != n:
            raise ParseError(f"label count {count} does not match image count {n}", offset=4)
        labels = np.frombuffer(_read_exact(fh, count, "label data"), dtype=np.uint8)
        if fh.read(1):
            raise ParseError("trailing bytes in label file", offset=fh.tell() - 1)

    if n_classes is None:
        n_classes = int(labels.max()) + 1 if len(labels) else 1
    return LabeledDataset(images, one_hot(labels, n_classes),
                          np.arange(n, dtype=np.int64), np.zeros(n, dtype=bool))


@dataclass
class SplitSpec:
    healing_fraction: float = 0.15
    test_count: int = 2000
    seed: int = 0


def healing_count(n, fraction):
    return int(round(fraction * n))


def split(dataset, spec):
    """Partition into (train, heal, test) before any poisoning happens.

    The test block is a uniform draw; the healing block is class-stratified
    (equal per-class counts, remainder uniform) so it always covers every
    class.  Subsets preserve ascending id order.
    """
    n = len(dataset)
    k = dataset.n_classes
    if not 0.0 < spec.healing_fraction < 0.5:
        raise ConfigurationError(
            f"healing_fraction must be in (0, 0.5), got {spec.healing_fraction}")
    if spec.test_count < 1:
        raise ConfigurationError("test_count must be positive")
    heal_n = healing_count(n, spec.healing_fraction)
    if heal_n < k:
        raise ConfigurationError(
            f"healing set of {heal_n} cannot cover {k} classes")
    if heal_n + spec.test_count >= n:
        raise ConfigurationError("dataset too small for the requested split")

    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(n)
    test_idx = perm[:spec.test_count]
    rest = perm[spec.test_count:]

    classes = dataset.classes()[rest]
    base = heal_n // k
    heal_parts = []
    leftover_parts = []
    for c in range(k):
        members = rest[classes == c]
        if len(members) < base:
            raise ConfigurationError(
                f"class {c} has only {len(members)} samples left; "
                f"cannot draw {base} for the healing set")
        heal_parts.append(members[:base])
        leftover_parts.append(members[base:])
    remainder = heal_n - base * k
    if remainder:
        leftover = np.concatenate(leftover_parts)
        heal_parts.append(rng.permutation(leftover)[:remainder])
    heal_idx = np.concatenate(heal_parts)
    train_idx = np.setdiff1d(rest, heal_idx, assume_unique=True)

    def ordered(idx):
        return dataset.take(np.sort(idx))

    return ordered(train_idx), ordered(heal_idx), ordered(test_idx)


def save_dataset(dataset, path):
    """Binary cache: magic, u64 header (n, H, W, C, classes), raw arrays.

    Arrays are little-endian: float64 inputs, float64 labels, int64 ids and
    one byte per poison flag.  Round-trips are bit-exact.
    """
    n, h, w, c = dataset.inputs.shape
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<5Q", n, h, w, c, dataset.n_classes))
        fh.write(dataset.inputs.astype("<f8").tobytes())
        fh.write(dataset.labels.astype("<f8").tobytes())
        fh.write(dataset.ids.astype("<i8").tobytes())
        fh.write(dataset.poison_flags.astype(np.uint8).tobytes())


def load_dataset(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DATASET_MAGIC:
            raise ParseError(f"bad dataset magic {magic!r}", offset=0)
        n, h, w, c, k = struct.unpack("<5Q", _read_exact(fh, 40, "dataset header"))
        inputs = np.frombuffer(
            _read_exact(fh, 8 * n * h * w * c, "inputs"), dtype="<f8").reshape(n, h, w, c)
        labels = np.frombuffer(
            _read_exact(fh, 8 * n * k, "labels"), dtype="<f8").reshape(n, k)
        ids = np.frombuffer(_read_exact(fh, 8 * n, "ids"), dtype="<i8")
        flags = np.frombuffer(_read_exact(fh, n, "flags"), dtype=np.uint8).astype(bool)
        if fh.read(1):
            raise ParseError("trailing bytes in dataset file", offset=fh.tell() - 1)
    return LabeledDataset(inputs.copy(), labels.copy(), ids.copy(), flags)
