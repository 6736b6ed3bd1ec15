"""
Threshold-sweep ROC/AUC, F1 and confusion counts for binary burning labels.

Every decision rule here is strict: a score is a positive prediction only
when it is greater than the threshold.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Sequence

import numpy as np
from sklearn.metrics import auc, confusion_matrix, f1_score

from .exceptions import DimensionError, UndefinedMetricError

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = np.round(np.linspace(0.0, 1.0, 21), 2)
F1_THRESHOLD = 0.5


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def to_dict(self) -> Dict[str, int]:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


@dataclass
class RocCurve:
    """
    ROC points, one per threshold, and the anchored trapezoid area.

    ``fpr``/``tpr`` follow the threshold order; the area is computed over the
    points sorted by (fpr, tpr) with (0, 0) and (1, 1) added.
    """
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def points(self) -> Dict[str, Any]:
        return {
            "thresholds": self.thresholds.tolist(),
            "fpr": self.fpr.tolist(),
            "tpr": self.tpr.tolist(),
        }


def _as_arrays(scores: Sequence[float], labels: Sequence[int]):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.size == 0:
        raise DimensionError("Metrics need at least one score", axis="N")
    if scores.shape != labels.shape:
        raise DimensionError(
            f"{scores.size} scores but {labels.size} labels", axis="N"
        )
    return scores, labels.astype(bool)


def confusion_counts(scores: Sequence[float], labels: Sequence[int],
                     threshold: float = F1_THRESHOLD) -> ConfusionCounts:
    scores, labels = _as_arrays(scores, labels)
    tn, fp, fn, tp = confusion_matrix(labels, scores > threshold, labels=[False, True]).ravel()
    return ConfusionCounts(tp=int(tp), fp=int(fp), tn=int(tn), fn=int(fn))


def roc_auc(scores: Sequence[float], labels: Sequence[int],
            thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> RocCurve:
    """
    ROC curve over a fixed threshold grid and its area.

    Args:
        scores: Predicted probabilities
        labels: Binary ground truth
        thresholds: Decision thresholds (21 uniform ones by default)

    Returns:
        RocCurve with per-threshold (fpr, tpr) and the AUC

    Raises:
        UndefinedMetricError: If labels hold a single class
        DimensionError: On empty or mismatched inputs
    """
    scores, labels = _as_arrays(scores, labels)
    positives = int(labels.sum())
    negatives = labels.size - positives
    if positives == 0 or negatives == 0:
        raise UndefinedMetricError(
            f"ROC AUC is undefined with {positives} positive and {negatives} negative label(s)"
        )

    thresholds = np.asarray(thresholds, dtype=np.float64)
    predicted = scores[None, :] > thresholds[:, None]
    tpr = (predicted & labels).sum(axis=1) / positives
    fpr = (predicted & ~labels).sum(axis=1) / negatives

    all_fpr = np.concatenate([[0.0], fpr, [1.0]])
    all_tpr = np.concatenate([[0.0], tpr, [1.0]])
    order = np.lexsort((all_tpr, all_fpr))
    area = float(auc(all_fpr[order], all_tpr[order]))
    return RocCurve(thresholds=thresholds, fpr=fpr, tpr=tpr, auc=area)


def f1(scores: Sequence[float], labels: Sequence[int], threshold: float = F1_THRESHOLD) -> float:
    """F1 of the strict-threshold predictions; 0 when precision + recall is 0."""
    scores, labels = _as_arrays(scores, labels)
    return float(f1_score(labels, scores > threshold, zero_division=0))
