"""Binary classification metrics and ROC analysis."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricReport:
    accuracy: float
    precision: float
    sensitivity: float
    specificity: float
    macro_f1: float | None = None
    flags: tuple = field(default=())

    def as_dict(self) -> dict:
        out = {"accuracy": self.accuracy, "precision": self.precision,
               "sensitivity": self.sensitivity, "specificity": self.specificity}
        if self.macro_f1 is not None:
            out["macro_f1"] = self.macro_f1
        if self.flags:
            out["flags"] = list(self.flags)
        return out


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auroc: float


def _binary(a, what: str) -> np.ndarray:
    a = np.asarray(a)
    if not np.all((a == 0) | (a == 1)):
        raise ValueError(f"{what} must be binary (0/1)")
    return a.astype(bool)


def confusion_counts(preds, labels) -> ConfusionCounts:
    p = _binary(preds, "predictions")
    y = _binary(labels, "labels")
    if p.shape != y.shape or p.size == 0:
        raise ValueError(f"predictions and labels must be non-empty and equal length ({p.shape} vs {y.shape})")
    return ConfusionCounts(tp=int(np.sum(p & y)), fp=int(np.sum(p & ~y)),
                           tn=int(np.sum(~p & ~y)), fn=int(np.sum(~p & y)))


def _ratio(num, den, name, flags):
    if den == 0:
        flags.append(f"{name}: zero denominator")
        return 0.0
    return num / den


def classification_metrics(c: ConfusionCounts) -> MetricReport:
    """Accuracy, precision, sensitivity and specificity; 0 plus a flag on empty denominators."""
    flags: list[str] = []
    precision = _ratio(c.tp, c.tp + c.fp, "precision", flags)
    sensitivity = _ratio(c.tp, c.tp + c.fn, "sensitivity", flags)
    specificity = _ratio(c.tn, c.tn + c.fp, "specificity", flags)
    accuracy = _ratio(c.tp + c.tn, c.total, "accuracy", flags)
    return MetricReport(accuracy, precision, sensitivity, specificity, None, tuple(flags))


def _f1(tp, fp, fn) -> float:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


def macro_f1(preds, labels) -> float:
    """Mean of per-class F1, each class taken in turn as the positive one."""
    c = confusion_counts(preds, labels)
    return 0.5 * (_f1(c.tp, c.fp, c.fn) + _f1(c.tn, c.fn, c.fp))


def evaluate(preds, labels) -> MetricReport:
    c = confusion_counts(preds, labels)
    r = classification_metrics(c)
    return MetricReport(r.accuracy, r.precision, r.sensitivity, r.specificity,
                        macro_f1(preds, labels), r.flags)


def roc_auroc(scores, labels) -> RocCurve:
    """ROC by sweeping every distinct score; AUROC by the trapezoid rule.

    Tied scores move TPR and FPR together, so the trapezoid area equals the
    Mann-Whitney statistic with ties counted one half.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels, "labels")
    if s.shape != y.shape:
        raise ValueError("scores and labels must have equal length")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    last_of_run = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    tp = np.cumsum(y_sorted)[last_of_run]
    fp = np.cumsum(~y_sorted)[last_of_run]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thresholds = np.r_[np.inf, s_sorted[last_of_run]]
    auroc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, thresholds, auroc)
