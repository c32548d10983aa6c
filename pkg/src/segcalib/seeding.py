"""Deterministic random-stream derivation.

Every stochastic stage derives its own generator from an integer seed plus a
tuple of integer tags (subject index, sample index, fold, ...). Streams are
therefore independent of evaluation order and of thread scheduling: the same
(seed, tags) pair always yields the same counter-based Philox stream.
"""

from __future__ import annotations

import numpy as np

# Fixed tags for the pipeline stages that derive sub-streams.
TAG_DATASET = 1
TAG_TRAIN = 2
TAG_CALIBRATE = 3
TAG_MC = 4
TAG_SPLIT = 5


def derive_rng(seed: int, *tags: int) -> np.random.Generator:
    """Return a Philox generator keyed by ``seed`` mixed with ``tags``."""
    entropy = (int(seed),) + tuple(int(t) for t in tags)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
