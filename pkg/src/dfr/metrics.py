"""Group-wise accuracy metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = [
    "GroupMetrics",
    "group_accuracies",
    "worst_group_accuracy",
    "weighted_mean_accuracy",
    "evaluate",
]


@dataclass(frozen=True)
class GroupMetrics:
    """Per-group accuracies and their summaries.

    Groups without test rows have ``NaN`` accuracy and are left out of the
    worst-group minimum.
    """

    per_group_accuracy: np.ndarray
    per_group_count: np.ndarray
    worst_group_accuracy: float
    weighted_mean_accuracy: float
    unweighted_mean_over_examples: float

    @property
    def present(self) -> np.ndarray:
        return self.per_group_count > 0

    def to_dict(self) -> dict:
        per_group = []
        for g, (c, a) in enumerate(zip(self.per_group_count, self.per_group_accuracy)):
            per_group.append({"group": g, "count": int(c),
                              "accuracy": None if c == 0 else float(a)})
        return {
            "per_group": per_group,
            "worst": float(self.worst_group_accuracy),
            "weighted_mean": float(self.weighted_mean_accuracy),
            "mean_over_examples": float(self.unweighted_mean_over_examples),
        }


def group_accuracies(predictions, labels, groups, n_groups: int):
    """Return ``(accuracy, count)`` arrays of length ``n_groups``."""
    predictions = np.asarray(predictions).ravel()
    labels = np.asarray(labels).ravel()
    groups = np.asarray(groups).ravel().astype(np.int64)
    if not (predictions.shape == labels.shape == groups.shape):
        raise ValueError("predictions, labels and groups must have equal length")
    if groups.size and (groups.min() < 0 or groups.max() >= n_groups):
        bad = int(np.flatnonzero((groups < 0) | (groups >= n_groups))[0])
        raise ValueError(f"group id {int(groups[bad])} at row {bad} is not in [0, {n_groups})")
    counts = np.bincount(groups, minlength=n_groups)
    correct = np.bincount(groups, weights=(predictions == labels).astype(np.float64),
                          minlength=n_groups)
    acc = np.full(n_groups, np.nan)
    nz = counts > 0
    acc[nz] = correct[nz] / counts[nz]
    return acc, counts


def worst_group_accuracy(per_group_accuracy, counts=None) -> float:
    acc = np.asarray(per_group_accuracy, dtype=np.float64)
    mask = ~np.isnan(acc) if counts is None else np.asarray(counts) > 0
    if not mask.any():
        raise ValueError("all groups are empty")
    return float(acc[mask].min())


def weighted_mean_accuracy(per_group_accuracy, train_counts) -> float:
    """Group accuracies averaged with weights proportional to ``train_counts``."""
    acc = np.asarray(per_group_accuracy, dtype=np.float64)
    w = np.asarray(train_counts, dtype=np.float64)
    if acc.shape != w.shape:
        raise ValueError("accuracy and count vectors differ in length")
    total = w.sum()
    if total <= 0:
        raise ValueError("train counts sum to zero")
    # groups with zero weight contribute nothing even if their accuracy is NaN
    terms = np.where(w > 0, np.nan_to_num(acc, nan=0.0) * w, 0.0)
    if np.isnan(acc[w > 0]).any():
        raise ValueError("a group with positive weight has no accuracy")
    return float(terms.sum() / total)


def evaluate(predictions, labels, groups, n_groups: int,
             train_counts: Optional[np.ndarray] = None) -> GroupMetrics:
    """Compute :class:`GroupMetrics`.

    Without ``train_counts`` the weighted mean falls back to test-set
    prevalence, which equals the plain mean over examples.
    """
    acc, counts = group_accuracies(predictions, labels, groups, n_groups)
    worst = worst_group_accuracy(acc, counts)
    mean_ex = float(np.mean(np.asarray(predictions).ravel() == np.asarray(labels).ravel()))
    if train_counts is None:
        train_counts = counts
    present = counts > 0
    w = np.where(present, np.asarray(train_counts, dtype=np.float64), 0.0)
    weighted = weighted_mean_accuracy(acc, w) if w.sum() > 0 else float("nan")
    return GroupMetrics(acc, counts, worst, weighted, mean_ex)
