"""Accuracy and one-vs-rest precision / recall / F1."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError


@dataclass(frozen=True)
class ClassMetrics:
    label: str
    tp: int
    fp: int
    fn: int
    support: int
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    averaging: str
    per_class: list[ClassMetrics]

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy, "precision": self.precision, "recall": self.recall,
            "f1": self.f1, "averaging": self.averaging,
            "per_class": [
                {"class": c.label, "tp": c.tp, "fp": c.fp, "fn": c.fn, "support": c.support,
                 "precision": c.precision, "recall": c.recall, "f1": c.f1}
                for c in self.per_class
            ],
        }


def _ratio(num, den):
    return num / den if den else 0.0


def classification_metrics(y_true, y_pred, n_classes: int, averaging: str = "weighted",
                           class_names=None) -> Metrics:
    """Tally TP/FP/FN per class and average; zero denominators score 0."""
    if averaging not in ("macro", "weighted"):
        raise ConfigurationError(f"averaging must be 'macro' or 'weighted', got {averaging!r}")
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    names = class_names or [str(c) for c in range(n_classes)]
    per_class = []
    for c in range(n_classes):
        tp = int(np.sum((y_pred == c) & (y_true == c)))
        fp = int(np.sum((y_pred == c) & (y_true != c)))
        fn = int(np.sum((y_pred != c) & (y_true == c)))
        p = _ratio(tp, tp + fp)
        r = _ratio(tp, tp + fn)
        per_class.append(ClassMetrics(names[c], tp, fp, fn, tp + fn, p, r, _ratio(2 * p * r, p + r)))

    support = np.array([c.support for c in per_class], dtype=float)
    weights = support / support.sum() if averaging == "weighted" and support.sum() \
        else np.full(n_classes, 1.0 / n_classes)

    def avg(attr):
        return float(np.dot(weights, [getattr(c, attr) for c in per_class]))

    accuracy = float(np.mean(y_true == y_pred)) if y_true.size else 0.0
    return Metrics(accuracy, avg("precision"), avg("recall"), avg("f1"), averaging, per_class)
