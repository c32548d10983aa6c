"""Core containers: grids, subjects, and deterministic fold splits.

A grid is a plain 2-D float64 numpy array (see :mod:`segcalib.validation`).
A :class:`Subject` bundles the grids describing one case: the input image,
the sampled binary labels, the evaluation mask, and optionally the generating
posterior and cached network logits. Subjects are immutable after
construction and safe to share across workers.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .exceptions import GridError, ParameterError, SplitError
from .validation import (
    as_grid,
    check_binary_grid,
    check_in_range,
    check_probability_grid,
    check_same_shape,
)


def make_grid(height: int, width: int, fill: float = 0.0) -> np.ndarray:
    """Return a ``height`` x ``width`` grid filled with ``fill``."""
    if height < 1 or width < 1:
        raise GridError(f"grid dimensions must be >= 1, got {height}x{width}")
    return np.full((height, width), float(fill), dtype=np.float64)


def sigmoid_map(logits) -> np.ndarray:
    """Elementwise logistic function of a logit grid.

    Uses the split formulation exp(-|z|) / (1 + exp(-|z|)) so that values up
    to |z| = 700 neither overflow nor lose the saturated tail.
    """
    z = as_grid(logits, "logits")
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    """Sigmoid for pre-validated float arrays of any shape (internal fast path)."""
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def predicted_class(probs, threshold: float = 0.5) -> np.ndarray:
    """Binary class map: 1 where probability >= threshold, else 0.

    A probability exactly at the threshold predicts class 1.
    """
    p = check_probability_grid(probs)
    check_in_range(threshold, 0.0, 1.0, "threshold")
    return (p >= threshold).astype(np.float64)


def prediction_confidence(probs) -> np.ndarray:
    """Confidence of the hard prediction: max(p, 1 - p), in [0.5, 1]."""
    p = check_probability_grid(probs)
    return np.maximum(p, 1.0 - p)


def _frozen(arr: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if arr is None:
        return None
    arr = np.array(arr, dtype=np.float64)  # private copy
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Subject:
    """One case: image, sampled labels, evaluation mask, optional extras.

    ``reference_posterior`` is the per-voxel probability the labels were
    sampled from (available for synthetic data only). ``logits`` caches the
    raw network output so calibrators can be fitted without re-running the
    network.
    """

    id: str
    image: np.ndarray
    labels: np.ndarray
    eval_mask: np.ndarray
    reference_posterior: Optional[np.ndarray] = None
    logits: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.id:
            raise ParameterError("subject id must be a nonempty string")
        image = as_grid(self.image, "image")
        labels = check_binary_grid(self.labels, "labels")
        eval_mask = check_binary_grid(self.eval_mask, "eval_mask")
        named = [("image", image), ("labels", labels), ("eval_mask", eval_mask)]
        posterior = None
        if self.reference_posterior is not None:
            posterior = check_probability_grid(self.reference_posterior, "reference_posterior")
            named.append(("reference_posterior", posterior))
        logits = None
        if self.logits is not None:
            logits = as_grid(self.logits, "logits")
            named.append(("logits", logits))
        check_same_shape(*named)
        if eval_mask.sum() < 1:
            raise GridError("eval_mask must select at least one voxel")
        object.__setattr__(self, "image", _frozen(image))
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "eval_mask", _frozen(eval_mask))
        object.__setattr__(self, "reference_posterior", _frozen(posterior))
        object.__setattr__(self, "logits", _frozen(logits))

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape

    def with_logits(self, logits: np.ndarray) -> "Subject":
        """Return a copy of this subject with the given logit grid attached."""
        return dataclasses.replace(self, logits=logits)


@dataclass(frozen=True)
class FoldSplit:
    """Assignment of every subject id to exactly one of ``n_folds`` folds."""

    n_folds: int
    assignment: dict[str, int]

    def __post_init__(self):
        folds = set(self.assignment.values())
        if any(f < 0 or f >= self.n_folds for f in folds):
            raise SplitError("fold indices must lie in [0, n_folds)")

    def fold_ids(self, fold: int) -> list[str]:
        """Ids assigned to ``fold`` (the held-out portion), in sorted order."""
        return sorted(sid for sid, f in self.assignment.items() if f == fold)

    def rest_ids(self, fold: int) -> list[str]:
        """Ids of every other fold (the training portion), in sorted order."""
        return sorted(sid for sid, f in self.assignment.items() if f != fold)


def split_folds(subject_ids: Sequence[str], n_folds: int, seed: int) -> FoldSplit:
    """Deterministic cross-validation split.

    The ordered id list is permuted with a seeded generator, then assigned
    round-robin, so fold sizes differ by at most one and the split is
    reconstructible bit-exactly from (seed, ids, n_folds).
    """
    ids = list(subject_ids)
    if n_folds < 2:
        raise SplitError(f"n_folds must be >= 2, got {n_folds}")
    if len(ids) < n_folds:
        raise SplitError(f"need at least {n_folds} subjects, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise SplitError("subject ids must be unique")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    assignment = {ids[int(pos)]: i % n_folds for i, pos in enumerate(order)}
    return FoldSplit(n_folds=n_folds, assignment=assignment)
