"""Confusion matrices, classification metrics, and fold aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyMatrixError, LabelOutOfRangeError, MixedLabelSetsError
from .labels import label_classes


@dataclass
class ConfusionMatrix:
    """Row = ground truth class, column = predicted class."""

    counts: np.ndarray
    label_set_id: str

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        n_classes = len(label_classes(self.label_set_id))
        if self.counts.shape != (n_classes, n_classes):
            raise ValueError(
                f"counts shape {self.counts.shape} does not match "
                f"{n_classes}-class label set '{self.label_set_id}'"
            )
        if np.any(self.counts < 0):
            raise ValueError("confusion matrix counts must be non-negative")

    @property
    def n_samples(self) -> int:
        return int(self.counts.sum())

    @property
    def classes(self) -> tuple[str, ...]:
        return label_classes(self.label_set_id)

    def to_dict(self) -> dict:
        return {
            "label_set_id": self.label_set_id,
            "classes": list(self.classes),
            "counts": self.counts.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ConfusionMatrix":
        return cls(np.asarray(doc["counts"]), doc["label_set_id"])


def confusion_matrix(pairs, label_set_id: str) -> ConfusionMatrix:
    """Tally (true index, predicted index) pairs into a matrix."""
    n_classes = len(label_classes(label_set_id))
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    for true_idx, pred_idx in pairs:
        if not (0 <= true_idx < n_classes and 0 <= pred_idx < n_classes):
            raise LabelOutOfRangeError(
                f"pair ({true_idx}, {pred_idx}) outside [0, {n_classes})"
            )
        counts[true_idx, pred_idx] += 1
    return ConfusionMatrix(counts, label_set_id)


@dataclass
class MetricsReport:
    label_set_id: str
    n_samples: int
    accuracy: float
    per_class: dict          # class name -> {precision, recall, f1, support}
    weighted: dict           # {precision, recall, f1}
    macro: dict              # {precision, recall, f1}
    zero_support_classes: list[str] = field(default_factory=list)
    confusion: ConfusionMatrix | None = None

    def to_dict(self) -> dict:
        doc = {
            "label_set_id": self.label_set_id,
            "n_samples": self.n_samples,
            "accuracy": self.accuracy,
            "per_class": self.per_class,
            "weighted": self.weighted,
            "macro": self.macro,
            "zero_support_classes": list(self.zero_support_classes),
        }
        if self.confusion is not None:
            doc["confusion_matrix"] = self.confusion.to_dict()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        cm = doc.get("confusion_matrix")
        return cls(
            label_set_id=doc["label_set_id"],
            n_samples=doc["n_samples"],
            accuracy=doc["accuracy"],
            per_class=doc["per_class"],
            weighted=doc["weighted"],
            macro=doc["macro"],
            zero_support_classes=list(doc.get("zero_support_classes", [])),
            confusion=ConfusionMatrix.from_dict(cm) if cm else None,
        )


def compute_metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Per-class precision/recall/F1 plus support-weighted and macro averages.

    Zero-denominator conventions: precision and recall fall back to 0, F1
    is 0 when precision + recall is 0. Classes with zero support are
    flagged in zero_support_classes.
    """
    counts = cm.counts
    total = counts.sum()
    if total < 1:
        raise EmptyMatrixError("cannot compute metrics on an empty confusion matrix")

    classes = cm.classes
    tp = np.diag(counts).astype(float)
    support = counts.sum(axis=1).astype(float)
    predicted = counts.sum(axis=0).astype(float)

    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    pr_sum = precision + recall
    f1 = np.divide(2 * precision * recall, pr_sum, out=np.zeros_like(tp), where=pr_sum > 0)

    per_class = {
        name: {
            "precision": float(precision[i]),
            "recall": float(recall[i]),
            "f1": float(f1[i]),
            "support": int(support[i]),
        }
        for i, name in enumerate(classes)
    }
    weights = support / total
    weighted = {
        "precision": float(np.sum(weights * precision)),
        "recall": float(np.sum(weights * recall)),
        "f1": float(np.sum(weights * f1)),
    }
    macro = {
        "precision": float(np.mean(precision)),
        "recall": float(np.mean(recall)),
        "f1": float(np.mean(f1)),
    }
    return MetricsReport(
        label_set_id=cm.label_set_id,
        n_samples=int(total),
        accuracy=float(tp.sum() / total),
        per_class=per_class,
        weighted=weighted,
        macro=macro,
        zero_support_classes=[name for i, name in enumerate(classes) if support[i] == 0],
        confusion=cm,
    )


_ENSEMBLE_METRICS = (
    ("accuracy", lambda r: r.accuracy),
    ("weighted_precision", lambda r: r.weighted["precision"]),
    ("weighted_recall", lambda r: r.weighted["recall"]),
    ("weighted_f1", lambda r: r.weighted["f1"]),
    ("macro_precision", lambda r: r.macro["precision"]),
    ("macro_recall", lambda r: r.macro["recall"]),
    ("macro_f1", lambda r: r.macro["f1"]),
)


@dataclass
class EnsembleReport:
    """Fold-averaged metrics with min-max ranges and the summed matrix."""

    label_set_id: str
    k: int
    fold_reports: list[MetricsReport]
    mean: dict
    fold_range: dict          # metric -> (min, max)
    ci95: dict                # metric -> (lo, hi), normal approximation
    aggregate_confusion: ConfusionMatrix | None

    def to_dict(self) -> dict:
        return {
            "label_set_id": self.label_set_id,
            "k": self.k,
            "mean": self.mean,
            "fold_range": {k: list(v) for k, v in self.fold_range.items()},
            "ci95": {k: list(v) for k, v in self.ci95.items()},
            "aggregate_confusion": (
                self.aggregate_confusion.to_dict() if self.aggregate_confusion else None
            ),
            "folds": [r.to_dict() for r in self.fold_reports],
        }


def ensemble_metrics(reports: list[MetricsReport]) -> EnsembleReport:
    """Aggregate per-fold reports: arithmetic means, min-max range, summed CM.

    The min-max range mirrors the usual parenthesized presentation; the
    normal-approximation 95% interval is reported separately and is not
    claimed to be the same quantity.
    """
    if not reports:
        raise ValueError("need at least one fold report")
    label_sets = {r.label_set_id for r in reports}
    if len(label_sets) != 1:
        raise MixedLabelSetsError(f"reports span label sets {sorted(label_sets)}")

    mean = {}
    fold_range = {}
    ci95 = {}
    k = len(reports)
    for name, getter in _ENSEMBLE_METRICS:
        values = [float(getter(r)) for r in reports]
        mu = sum(values) / k
        mean[name] = mu
        fold_range[name] = (min(values), max(values))
        if k > 1:
            sd = math.sqrt(sum((v - mu) ** 2 for v in values) / (k - 1))
            half = 1.96 * sd / math.sqrt(k)
        else:
            half = 0.0
        ci95[name] = (mu - half, mu + half)

    aggregate = None
    if all(r.confusion is not None for r in reports):
        total = np.sum([r.confusion.counts for r in reports], axis=0)
        aggregate = ConfusionMatrix(total, reports[0].label_set_id)

    return EnsembleReport(
        label_set_id=reports[0].label_set_id,
        k=k,
        fold_reports=list(reports),
        mean=mean,
        fold_range=fold_range,
        ci95=ci95,
        aggregate_confusion=aggregate,
    )


def misclassification_report(cm: ConfusionMatrix, pairs_with_uids=None, max_examples: int = 5):
    """Off-diagonal cells sorted by count (descending), ties by class index.

    pairs_with_uids, when given, is an iterable of (true_index,
    predicted_index, series_uid) used to attach up to max_examples example
    series per cell.
    """
    examples: dict[tuple[int, int], list[str]] = {}
    if pairs_with_uids is not None:
        for true_idx, pred_idx, series_uid in pairs_with_uids:
            if true_idx != pred_idx:
                bucket = examples.setdefault((true_idx, pred_idx), [])
                if len(bucket) < max_examples:
                    bucket.append(series_uid)

    classes = cm.classes
    cells = []
    for t in range(len(classes)):
        for p in range(len(classes)):
            if t != p and cm.counts[t, p] > 0:
                cells.append((int(cm.counts[t, p]), t, p))
    cells.sort(key=lambda item: (-item[0], item[1], item[2]))
    return [
        {
            "true": classes[t],
            "predicted": classes[p],
            "count": count,
            "examples": examples.get((t, p), []),
        }
        for count, t, p in cells
    ]
