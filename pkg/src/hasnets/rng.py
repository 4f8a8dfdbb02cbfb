"""Named random substreams derived from a single run seed.

Every consumer of randomness (splits, poison selection, weight init, dropout,
noise fields, overlay draws, gradient noise) gets its own generator via
``substream(seed, "name", ...)``.  Streams with different paths are
statistically independent, so adding or removing draws in one consumer never
perturbs another.
"""
from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _part_to_int(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & _MASK64
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, *path) -> np.random.Generator:
    """Generator for the substream named by ``path`` under ``seed``.

    Path parts may be strings (hashed) or integers (used directly), so
    per-sample streams like ``substream(seed, "strip", sample_id)`` are cheap.
    """
    entropy = [int(seed) & _MASK64] + [_part_to_int(p) for p in path]
    return np.random.default_rng(np.random.SeedSequence(entropy))
