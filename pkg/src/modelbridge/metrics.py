"""Classification metrics computed from a confusion matrix."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


def _check(y_true, y_pred) -> tuple[np.ndarray, np.ndarray]:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ValueError(f"label arrays must be 1-D and equal length, got {y_true.shape} and {y_pred.shape}")
    return y_true, y_pred


def confusion_matrix(y_true, y_pred, n_classes: int | None = None) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    y_true, y_pred = _check(y_true, y_pred)
    if n_classes is None:
        n_classes = int(max(y_true.max(initial=-1), y_pred.max(initial=-1))) + 1
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def balanced_accuracy(y_true, y_pred) -> float:
    """Mean recall over the classes present in ``y_true``."""
    cm = confusion_matrix(y_true, y_pred)
    support = cm.sum(axis=1)
    present = support > 0
    if not present.all():
        log.warning("excluding %d class(es) with zero support from balanced accuracy", int((~present).sum()))
    recall = np.diag(cm)[present] / support[present]
    return float(recall.mean())


def f1_scores(y_true, y_pred, labels=None) -> tuple[float, float, np.ndarray]:
    """(macro, weighted, per-class) F1 with the 0/0 -> 0 convention.

    Classes default to the union of true and predicted labels.
    """
    y_true, y_pred = _check(y_true, y_pred)
    if labels is None:
        labels = np.union1d(y_true, y_pred)
    labels = np.asarray(labels, dtype=np.int64)
    n = int(max(labels.max(initial=-1), y_true.max(initial=-1), y_pred.max(initial=-1))) + 1
    cm = confusion_matrix(y_true, y_pred, n)[np.ix_(labels, labels)]
    # predicted/actual totals must include samples outside ``labels``
    full = confusion_matrix(y_true, y_pred, n)
    tp = np.diag(cm).astype(np.float64)
    pred_tot = full.sum(axis=0)[labels].astype(np.float64)
    true_tot = full.sum(axis=1)[labels].astype(np.float64)
    precision = np.divide(tp, pred_tot, out=np.zeros_like(tp), where=pred_tot > 0)
    recall = np.divide(tp, true_tot, out=np.zeros_like(tp), where=true_tot > 0)
    denom = precision + recall
    per_class = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    macro = float(per_class.mean()) if per_class.size else 0.0
    weighted = float((per_class * true_tot).sum() / true_tot.sum()) if true_tot.sum() > 0 else 0.0
    return macro, weighted, per_class


@dataclass
class MetricSet:
    balanced_accuracy: float
    f1_macro: float
    f1_weighted: float
    precision: list[float]
    recall: list[float]
    confusion: list[list[int]]

    def to_dict(self) -> dict:
        return {
            "balanced_accuracy": self.balanced_accuracy,
            "f1_macro": self.f1_macro,
            "f1_weighted": self.f1_weighted,
            "precision": self.precision,
            "recall": self.recall,
            "confusion": self.confusion,
        }


def evaluate(y_true, y_pred, n_classes: int) -> MetricSet:
    y_true, y_pred = _check(y_true, y_pred)
    cm = confusion_matrix(y_true, y_pred, n_classes)
    col = cm.sum(axis=0)
    row = cm.sum(axis=1)
    tp = np.diag(cm).astype(np.float64)
    precision = np.divide(tp, col, out=np.zeros_like(tp), where=col > 0)
    recall = np.divide(tp, row, out=np.zeros_like(tp), where=row > 0)
    macro, weighted, _ = f1_scores(y_true, y_pred, labels=np.arange(n_classes)[row + col > 0])
    return MetricSet(
        balanced_accuracy(y_true, y_pred),
        macro,
        weighted,
        [float(v) for v in precision],
        [float(v) for v in recall],
        cm.tolist(),
    )
