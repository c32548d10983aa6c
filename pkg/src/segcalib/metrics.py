"""Calibration and segmentation metrics.

Voxel predictions are binned into K equally spaced confidence bins; a voxel
with confidence c lands in bin floor(c * K), with c = 1.0 assigned to the
last bin. The expected calibration error is the bin-count-weighted mean
absolute gap between bin accuracy and bin confidence. Bins also keep
per-subject tallies so the subject-level spread of bin accuracy can be
reported alongside the pooled curve.

Two confidence conventions are supported and stamped into every report:

* ``prediction`` mode bins max(p, 1 - p), the confidence of the hard
  prediction, and scores a voxel correct when the hard prediction matches
  the label (the default);
* ``class1`` mode bins the raw class-1 probability and scores a voxel
  correct when the label is 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .exceptions import (
    DegenerateComparisonError,
    MetricError,
    ParameterError,
)
from .validation import (
    as_grid,
    check_binary_grid,
    check_probability_grid,
    check_same_shape,
)

PREDICTION_CONFIDENCE = "prediction"
CLASS1_PROBABILITY = "class1"
CONFIDENCE_MODES = (PREDICTION_CONFIDENCE, CLASS1_PROBABILITY)

EXACT = "exact"
NORMAL_APPROX = "normal_approx"

HIGHER = "higher"
LOWER = "lower"

# Largest effective sample size for which the exact null distribution of the
# signed-rank statistic is enumerated; beyond it the tie-corrected normal
# approximation is within 0.02 of exact.
EXACT_WILCOXON_LIMIT = 25


def confidence_and_correctness(probs, labels, mode: str = PREDICTION_CONFIDENCE):
    """Per-voxel confidence and correctness grids under the given mode."""
    p = check_probability_grid(probs)
    y = check_binary_grid(labels, "labels")
    check_same_shape(("probabilities", p), ("labels", y))
    if mode == PREDICTION_CONFIDENCE:
        predicted = (p >= 0.5).astype(np.float64)
        return np.maximum(p, 1.0 - p), (predicted == y).astype(np.float64)
    if mode == CLASS1_PROBABILITY:
        return p, (y == 1.0).astype(np.float64)
    raise ParameterError(f"unknown confidence mode {mode!r}")


class ReliabilityBins:
    """Accumulates bin tallies, globally and per subject.

    Per-subject tallies can be computed independently and merged; the merge
    is a bin-wise addition, so it is associative and commutative.
    """

    def __init__(self, n_bins: int = 20, mode: str = PREDICTION_CONFIDENCE):
        if n_bins < 1:
            raise ParameterError("n_bins must be >= 1")
        if mode not in CONFIDENCE_MODES:
            raise ParameterError(f"unknown confidence mode {mode!r}")
        self.n_bins = n_bins
        self.mode = mode
        self.counts = np.zeros(n_bins, dtype=np.int64)
        self.confidence_sums = np.zeros(n_bins)
        self.correct_sums = np.zeros(n_bins)
        self.per_subject: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def add(self, confidence, correctness, mask, subject_id: str) -> "ReliabilityBins":
        """Tally one subject's masked voxels."""
        conf = check_probability_grid(confidence, "confidence")
        correct = check_binary_grid(correctness, "correctness")
        m = check_binary_grid(mask, "mask")
        check_same_shape(("confidence", conf), ("correctness", correct), ("mask", m))
        selected = m == 1.0
        values = conf[selected]
        hits = correct[selected]
        bins = np.minimum((values * self.n_bins).astype(np.int64), self.n_bins - 1)
        counts = np.bincount(bins, minlength=self.n_bins).astype(np.int64)
        self.counts += counts
        self.confidence_sums += np.bincount(bins, weights=values, minlength=self.n_bins)
        correct_counts = np.bincount(bins, weights=hits, minlength=self.n_bins)
        self.correct_sums += correct_counts
        if subject_id in self.per_subject:
            old_counts, old_correct = self.per_subject[subject_id]
            self.per_subject[subject_id] = (old_counts + counts, old_correct + correct_counts)
        else:
            self.per_subject[subject_id] = (counts, correct_counts)
        return self

    def add_probabilities(self, probs, labels, mask, subject_id: str) -> "ReliabilityBins":
        conf, correct = confidence_and_correctness(probs, labels, self.mode)
        return self.add(conf, correct, mask, subject_id)

    def merge(self, other: "ReliabilityBins") -> "ReliabilityBins":
        if other.n_bins != self.n_bins or other.mode != self.mode:
            raise ParameterError("cannot merge bins with different n_bins or mode")
        merged = ReliabilityBins(self.n_bins, self.mode)
        merged.counts = self.counts + other.counts
        merged.confidence_sums = self.confidence_sums + other.confidence_sums
        merged.correct_sums = self.correct_sums + other.correct_sums
        merged.per_subject = dict(self.per_subject)
        for sid, (counts, correct) in other.per_subject.items():
            if sid in merged.per_subject:
                old_counts, old_correct = merged.per_subject[sid]
                merged.per_subject[sid] = (old_counts + counts, old_correct + correct)
            else:
                merged.per_subject[sid] = (counts, correct)
        return merged

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def bin_edges(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_bins + 1)

    def accuracy(self) -> np.ndarray:
        """Per-bin accuracy; empty bins are nan."""
        with np.errstate(invalid="ignore"):
            return np.where(self.counts > 0, self.correct_sums / np.maximum(self.counts, 1), np.nan)

    def confidence(self) -> np.ndarray:
        """Per-bin mean confidence; empty bins are nan."""
        with np.errstate(invalid="ignore"):
            return np.where(
                self.counts > 0, self.confidence_sums / np.maximum(self.counts, 1), np.nan
            )


def ece(bins: ReliabilityBins) -> float:
    """Bin-count-weighted mean |accuracy - confidence|; empty bins contribute 0."""
    n = bins.total
    if n < 1:
        raise MetricError("ECE is undefined with no binned voxels")
    nonempty = bins.counts > 0
    acc = bins.correct_sums[nonempty] / bins.counts[nonempty]
    conf = bins.confidence_sums[nonempty] / bins.counts[nonempty]
    return float(np.sum(bins.counts[nonempty] / n * np.abs(acc - conf)))


def subject_ece(probs, labels, mask, n_bins: int = 20, mode: str = PREDICTION_CONFIDENCE) -> float:
    """ECE of a single subject, binned over its own masked voxels."""
    bins = ReliabilityBins(n_bins, mode).add_probabilities(probs, labels, mask, "subject")
    return ece(bins)


@dataclass(frozen=True)
class EceReport:
    """Pooled calibration summary plus per-subject values.

    ``ece`` pools every masked voxel into one binning; ``per_subject_ece``
    bins each subject separately (the quantity averaged in results tables).
    """

    ece: float
    bins: ReliabilityBins
    per_subject_ece: dict[str, float]
    mode: str

    @property
    def mean_subject_ece(self) -> float:
        return float(np.mean(list(self.per_subject_ece.values())))


def ece_report(
    entries: Sequence[tuple[str, np.ndarray, np.ndarray, np.ndarray]],
    n_bins: int = 20,
    mode: str = PREDICTION_CONFIDENCE,
) -> EceReport:
    """Build the pooled bins and per-subject ECEs for (id, probs, labels, mask) entries."""
    if not entries:
        raise MetricError("at least one subject is required")
    bins = ReliabilityBins(n_bins, mode)
    per_subject = {}
    for subject_id, probs, labels, mask in entries:
        bins.add_probabilities(probs, labels, mask, subject_id)
        per_subject[subject_id] = subject_ece(probs, labels, mask, n_bins, mode)
    return EceReport(ece=ece(bins), bins=bins, per_subject_ece=per_subject, mode=mode)


def dice_score(pred_mask, true_mask) -> float:
    """Overlap 2|A n B| / (|A| + |B|); two empty masks score 1.0."""
    a = check_binary_grid(pred_mask, "pred_mask")
    b = check_binary_grid(true_mask, "true_mask")
    check_same_shape(("pred_mask", a), ("true_mask", b))
    size = a.sum() + b.sum()
    if size == 0:
        return 1.0
    return float(2.0 * (a * b).sum() / size)


@dataclass(frozen=True)
class BinSubjectStats:
    """Distribution of per-subject accuracies within one bin."""

    bin_index: int
    subject_ids: tuple[str, ...]
    accuracies: np.ndarray
    counts: np.ndarray
    mean: float
    std: float
    median: float
    q1: float
    q3: float


def subject_bin_distribution(
    bins: ReliabilityBins, min_bin_count: int = 10
) -> list[Optional[BinSubjectStats]]:
    """Per-bin subject-level accuracy statistics.

    A subject qualifies for a bin when it has at least ``min_bin_count``
    voxels there, which avoids 0/1 accuracy artifacts from nearly empty
    bins. Quartiles use linear interpolation; the standard deviation is the
    population one. Bins without qualifying subjects yield None.
    """
    out: list[Optional[BinSubjectStats]] = []
    for k in range(bins.n_bins):
        ids, accs, counts = [], [], []
        for sid in sorted(bins.per_subject):
            s_counts, s_correct = bins.per_subject[sid]
            if s_counts[k] >= min_bin_count:
                ids.append(sid)
                accs.append(s_correct[k] / s_counts[k])
                counts.append(int(s_counts[k]))
        if not ids:
            out.append(None)
            continue
        acc = np.asarray(accs, dtype=np.float64)
        out.append(
            BinSubjectStats(
                bin_index=k,
                subject_ids=tuple(ids),
                accuracies=acc,
                counts=np.asarray(counts, dtype=np.int64),
                mean=float(acc.mean()),
                std=float(acc.std()),
                median=float(np.quantile(acc, 0.5)),
                q1=float(np.quantile(acc, 0.25)),
                q3=float(np.quantile(acc, 0.75)),
            )
        )
    return out


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    n_effective: int
    method: str


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_values = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_values[j + 1] == sorted_values[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _exact_signed_rank_p(ranks: np.ndarray, w_plus: float) -> float:
    """Two-sided exact p by enumerating the null distribution of W+.

    Under the null each |difference| takes its + or - sign independently
    with probability 1/2, so W+ is a sum of independently included ranks.
    Average ranks are multiples of 0.5; doubling makes them integers and the
    distribution is built by convolution, which enumerates all 2^n sign
    assignments without listing them.
    """
    doubled = np.rint(2.0 * ranks).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    n_patterns = 2.0 ** len(ranks)
    w2 = int(np.rint(2.0 * w_plus))
    p_low = counts[: w2 + 1].sum() / n_patterns
    p_high = counts[w2:].sum() / n_patterns
    return min(1.0, 2.0 * min(p_low, p_high))


def _normal_signed_rank_p(ranks: np.ndarray, w: float, n: int) -> float:
    """Two-sided normal approximation with tie correction and continuity
    correction. ``w`` is min(W+, W-), which never exceeds the null mean."""
    mu = n * (n + 1) / 4.0
    variance = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    variance -= float(np.sum(tie_counts**3 - tie_counts)) / 48.0
    if variance <= 0:
        raise DegenerateComparisonError("all differences are tied at one magnitude")
    z = (w - mu + 0.5) / math.sqrt(variance)
    p = 2.0 * 0.5 * math.erfc(-z / math.sqrt(2.0))
    return min(1.0, p)


def wilcoxon_signed_rank(values_a, values_b) -> WilcoxonResult:
    """Two-sided paired signed-rank test.

    Zero differences are dropped; ties in |difference| get average ranks.
    The statistic is min(W+, W-). Exact enumeration is used up to
    ``EXACT_WILCOXON_LIMIT`` effective pairs, the tie- and
    continuity-corrected normal approximation beyond.
    """
    a = np.asarray(values_a, dtype=np.float64)
    b = np.asarray(values_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ParameterError("paired value vectors must be 1-D and equal length")
    differences = a - b
    differences = differences[differences != 0.0]
    n = len(differences)
    if n == 0:
        raise DegenerateComparisonError("all paired differences are zero")
    ranks = _average_ranks(np.abs(differences))
    w_plus = float(ranks[differences > 0].sum())
    w_minus = float(ranks[differences < 0].sum())
    w = min(w_plus, w_minus)
    if n <= EXACT_WILCOXON_LIMIT:
        p = _exact_signed_rank_p(ranks, w_plus)
        method = EXACT
    else:
        p = _normal_signed_rank_p(ranks, w, n)
        method = NORMAL_APPROX
    return WilcoxonResult(statistic=w, p_value=p, n_effective=n, method=method)


def best_marking(
    per_method_values: dict[str, dict[str, float]],
    direction: str,
    alpha: float = 0.05,
) -> set[str]:
    """Mark the best-mean method plus all methods statistically tied with it.

    ``per_method_values`` maps method name to {subject id: value}; all
    methods must cover the same subjects. A method is marked when its paired
    signed-rank test against the best method has p >= alpha; a degenerate
    test (identical values) also counts as tied.
    """
    if len(per_method_values) < 2:
        raise ParameterError("best marking needs at least two methods")
    if direction not in (HIGHER, LOWER):
        raise ParameterError(f"direction must be {HIGHER!r} or {LOWER!r}")
    methods = sorted(per_method_values)
    subject_ids = sorted(per_method_values[methods[0]])
    for method in methods:
        if sorted(per_method_values[method]) != subject_ids:
            raise ParameterError("methods must be paired over identical subjects")
    vectors = {
        m: np.array([per_method_values[m][sid] for sid in subject_ids]) for m in methods
    }
    means = {m: float(vectors[m].mean()) for m in methods}
    sign = -1.0 if direction == HIGHER else 1.0
    best = min(methods, key=lambda m: (sign * means[m], m))
    marked = {best}
    for method in methods:
        if method == best:
            continue
        try:
            result = wilcoxon_signed_rank(vectors[best], vectors[method])
            if result.p_value >= alpha:
                marked.add(method)
        except DegenerateComparisonError:
            marked.add(method)
    return marked
