"""Evaluation math: Gini impurity, ROC-AUC, mean/SD summaries, and the
R-squared to AUC effect-size conversion used to compare regressors with
classifiers on one scale.

All functions are pure and safe for unrestricted concurrent use.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClassCounts:
    """High/low label counts at a node or branch."""

    n_high: int
    n_low: int

    @property
    def total(self) -> int:
        return self.n_high + self.n_low


def gini(counts: ClassCounts) -> float:
    """Gini impurity 1 - p_high^2 - p_low^2 of a branch.

    Ranges over [0, 0.5] for two classes; 0 iff the branch is pure.
    """
    n = counts.total
    if n < 1:
        raise ValueError("gini requires at least one sample")
    p_high = counts.n_high / n
    p_low = counts.n_low / n
    return 1.0 - p_high * p_high - p_low * p_low


def weighted_split_gini(left: ClassCounts, right: ClassCounts) -> float:
    """Size-weighted child impurity of a binary split; lower is better."""
    n_l, n_r = left.total, right.total
    if n_l < 1 or n_r < 1:
        raise ValueError("both sides of a split must be non-empty")
    return (n_l * gini(left) + n_r * gini(right)) / (n_l + n_r)


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve of `scores` ranking binary `labels`.

    Equals the probability that a uniformly random positive outranks a
    uniformly random negative, with ties counted 1/2 (rank / Mann-Whitney
    form, identical to the trapezoidal ROC area).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1-D vectors")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError(
            f"AUC needs both classes; got {n_pos} positive / {n_neg} negative"
        )
    order = np.argsort(scores, kind="stable")
    ranks = _average_ranks(scores[order])
    pos_rank_sum = float(ranks[labels[order]].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _average_ranks(sorted_scores: np.ndarray) -> np.ndarray:
    """1-based ranks of an ascending vector, ties sharing their average rank."""
    n = sorted_scores.size
    ranks = np.arange(1, n + 1, dtype=np.float64)
    # Group equal values and replace each group's ranks with the group mean.
    boundaries = np.flatnonzero(sorted_scores[1:] != sorted_scores[:-1]) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [n]))
    for s, e in zip(starts, ends):
        if e - s > 1:
            ranks[s:e] = (s + 1 + e) / 2.0
    return ranks


def mean_sd(values, sample: bool = True) -> tuple[float, float]:
    """Mean and standard deviation of a non-empty vector.

    `sample=True` uses the n-1 denominator (the reporting default); a single
    value has SD 0 under either convention.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("mean_sd requires at least one value")
    mean = float(arr.mean())
    if arr.size == 1:
        return mean, 0.0
    ddof = 1 if sample else 0
    return mean, float(arr.std(ddof=ddof))


def normal_cdf(x: float) -> float:
    """Standard normal CDF via the erf closed form (|error| < 1e-7)."""
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def r2_to_auc(r2: float) -> float:
    """Convert a coefficient of determination to an AUC-equivalent.

    Chain: r = sqrt(R^2), Cohen's d = 2r / sqrt(1 - r^2), AUC = Phi(d / sqrt(2)).
    Strictly increasing in R^2 and fixes 0 -> 0.5. Negative inputs (possible
    for out-of-sample R^2) are clamped to 0 with a warning; R^2 >= 1 is an
    error because the conversion diverges there.
    """
    if not math.isfinite(r2):
        raise ValueError("r2 must be finite")
    if r2 >= 1.0:
        raise ValueError(f"r2={r2} out of range; conversion requires r2 < 1")
    if r2 < 0.0:
        log.warning("negative r2=%.6g clamped to 0 for AUC conversion", r2)
        r2 = 0.0
    r = math.sqrt(r2)
    d = 2.0 * r / math.sqrt(1.0 - r2)
    return normal_cdf(d / math.sqrt(2.0))
