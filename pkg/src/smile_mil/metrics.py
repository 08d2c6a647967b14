"""Evaluation metrics: rank-based AUC, confusion-matrix metrics with macro or
support-weighted averaging, and cross-fold aggregation."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

__all__ = [
    "MetricsReport",
    "SingleClassError",
    "auc",
    "confusion_metrics",
    "evaluate_predictions",
    "aggregate_cv",
    "CSV_HEADER",
]

CSV_HEADER = "ACC,AUC,F1,Recall,Precision"

DECISION_THRESHOLD = 0.5  # probability at or above this predicts positive


class SingleClassError(ValueError):
    """AUC needs at least one positive and one negative label."""


@dataclass
class MetricsReport:
    accuracy: float
    auc: float
    f1: float
    recall: float
    precision: float
    n_samples: int
    averaging: str = "weighted"

    def as_dict(self) -> dict:
        return asdict(self)

    def csv_row(self, digits: int = 6) -> str:
        """One row in the ACC, AUC, F1, Recall, Precision column order."""
        return ",".join(
            f"{v:.{digits}f}"
            for v in (self.accuracy, self.auc, self.f1, self.recall, self.precision)
        )


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: the fraction of positive-negative pairs ranked
    correctly, ties counted one half. Computed from midranks, which matches
    explicit pair counting exactly."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("AUC is undefined when only one class is present")

    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum_pos = ranks[labels == 1].sum()
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _per_class_counts(preds: np.ndarray, labels: np.ndarray, cls: int):
    tp = int(((preds == cls) & (labels == cls)).sum())
    fp = int(((preds == cls) & (labels != cls)).sum())
    fn = int(((preds != cls) & (labels == cls)).sum())
    return tp, fp, fn


def confusion_metrics(preds, labels, averaging: str = "weighted") -> MetricsReport:
    """Accuracy plus per-class precision/recall/F1 combined by macro or
    support-weighted averaging. A ratio with a zero denominator counts as 0.
    The AUC field is left at 0; fill it from probability scores."""
    if averaging not in ("macro", "weighted"):
        raise ValueError(f"averaging must be 'macro' or 'weighted', got {averaging!r}")
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1 or len(preds) == 0:
        raise ValueError("preds and labels must be equal-length non-empty vectors")

    accuracy = float((preds == labels).mean())
    precisions, recalls, f1s, supports = [], [], [], []
    for cls in (0, 1):
        tp, fp, fn = _per_class_counts(preds, labels, cls)
        p = tp / (tp + fp) if tp + fp > 0 else 0.0
        r = tp / (tp + fn) if tp + fn > 0 else 0.0
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        precisions.append(p)
        recalls.append(r)
        f1s.append(f)
        supports.append(int((labels == cls).sum()))

    if averaging == "macro":
        weights = np.array([0.5, 0.5])
    else:
        weights = np.asarray(supports, dtype=np.float64) / len(labels)
    return MetricsReport(
        accuracy=accuracy,
        auc=0.0,
        f1=float(weights @ f1s),
        recall=float(weights @ recalls),
        precision=float(weights @ precisions),
        n_samples=len(labels),
        averaging=averaging,
    )


def evaluate_predictions(probs, labels, averaging: str = "weighted") -> MetricsReport:
    """Full report from probability scores: confusion metrics at the 0.5
    decision threshold plus rank AUC."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    preds = (probs >= DECISION_THRESHOLD).astype(np.int64)
    report = confusion_metrics(preds, labels, averaging)
    report.auc = auc(probs, labels)
    return report


def aggregate_cv(reports: list[MetricsReport]) -> MetricsReport:
    """Unweighted arithmetic mean of each metric across folds."""
    if not reports:
        raise ValueError("cannot aggregate an empty report list")
    averaging = reports[0].averaging
    if any(r.averaging != averaging for r in reports):
        raise ValueError("all reports must share the same averaging mode")
    k = len(reports)
    return MetricsReport(
        accuracy=sum(r.accuracy for r in reports) / k,
        auc=sum(r.auc for r in reports) / k,
        f1=sum(r.f1 for r in reports) / k,
        recall=sum(r.recall for r in reports) / k,
        precision=sum(r.precision for r in reports) / k,
        n_samples=sum(r.n_samples for r in reports),
        averaging=averaging,
    )
