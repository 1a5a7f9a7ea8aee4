"""Ranking metrics for anomaly scores (higher score = more anomalous)."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError


def _validate(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    if labels is None:
        raise UndefinedMetricError("metric requires ground-truth labels")
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise UndefinedMetricError("scores and labels must be 1-D with equal length")
    n_pos = int(np.count_nonzero(labels == 1))
    if n_pos == 0 or n_pos == labels.size:
        raise UndefinedMetricError("metric is undefined unless both classes are present")
    return scores, labels == 1, n_pos


def auc(scores, labels) -> float:
    """ROC AUC via the Mann-Whitney U statistic with average ranks for ties.

    Equals P(score_anomaly > score_normal) + 0.5 * P(tie).
    """
    scores, pos, n_pos = _validate(scores, labels)
    n_neg = scores.size - n_pos
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def top_k_threshold(scores, k: int) -> float:
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return float(np.asarray(scores)[order[k - 1]])


def f1_top_k(scores, labels) -> float:
    """F1 when the k highest scores are flagged, k = number of true anomalies.

    With this threshold precision and recall coincide, so F1 = TP / k. Ties
    at the cut are resolved toward the lower index.
    """
    scores, pos, k = _validate(scores, labels)
    top = np.argsort(-scores, kind="stable")[:k]
    return float(np.count_nonzero(pos[top]) / k)
