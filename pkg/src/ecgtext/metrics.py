"""Multi-label classification metrics.

AUROC is the Mann-Whitney statistic computed from average ranks, which
equals (concordant + 0.5 * tied) / (positives * negatives) pair counting.
"""

from __future__ import annotations

import warnings

import numpy as np

__all__ = ["auroc", "macro_auroc", "f1_accuracy", "UndefinedMetricWarning"]


class UndefinedMetricWarning(UserWarning):
    pass


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative,
    counting ties as half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or scores.shape != labels.shape:
        raise ValueError(f"scores and labels must be matching vectors, got {scores.shape} and {labels.shape}")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("undefined AUC: needs at least one positive and one negative")
    ranks = _average_ranks(scores)
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def macro_auroc(scores: np.ndarray, labels: np.ndarray) -> tuple[float, list]:
    """Unweighted mean AUROC over label columns.

    Single-class columns are undefined: they are reported as None and
    excluded from the macro, with a warning.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    labels = np.atleast_2d(np.asarray(labels))
    per_class: list = []
    defined = []
    for k in range(labels.shape[1]):
        try:
            value = auroc(scores[:, k], labels[:, k])
        except ValueError:
            warnings.warn(
                f"label column {k} has a single class; AUC excluded from the macro",
                UndefinedMetricWarning,
                stacklevel=2,
            )
            per_class.append(None)
            continue
        per_class.append(value)
        defined.append(value)
    macro = float(np.mean(defined)) if defined else float("nan")
    return macro, per_class


def f1_accuracy(
    scores: np.ndarray, labels: np.ndarray, thresholds
) -> tuple[float, float, list[float], list[float]]:
    """Threshold scores per class, then score the binary predictions.

    Returns (macro F1, mean accuracy, per-class F1, per-class accuracy).
    F1 is 0 for a class with no predicted and no true positives; accuracy is
    per-label correctness averaged over labels and records.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    labels = np.atleast_2d(np.asarray(labels)).astype(np.int64)
    thresholds = np.asarray(thresholds, dtype=np.float64).reshape(-1)
    if thresholds.size != labels.shape[1]:
        raise ValueError("need one threshold per label column")
    preds = (scores >= thresholds[None, :]).astype(np.int64)
    per_f1: list[float] = []
    per_acc: list[float] = []
    for k in range(labels.shape[1]):
        tp = int(((preds[:, k] == 1) & (labels[:, k] == 1)).sum())
        fp = int(((preds[:, k] == 1) & (labels[:, k] == 0)).sum())
        fn = int(((preds[:, k] == 0) & (labels[:, k] == 1)).sum())
        denom = 2 * tp + fp + fn
        per_f1.append(2.0 * tp / denom if denom else 0.0)
        per_acc.append(float((preds[:, k] == labels[:, k]).mean()))
    return float(np.mean(per_f1)), float(np.mean(per_acc)), per_f1, per_acc
