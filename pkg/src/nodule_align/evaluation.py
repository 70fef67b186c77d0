"""Classification metrics: confusion matrix, per-class recall/F1, fold aggregation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class EvaluationError(ValueError):
    pass


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    """counts[i][j] = number of samples with true class i predicted as j."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.size == 0:
        raise EvaluationError("no predictions to evaluate")
    if preds.shape != labels.shape:
        raise EvaluationError(f"preds shape {preds.shape} != labels shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= num_classes or preds.min() < 0 or preds.max() >= num_classes:
        raise EvaluationError(f"class index outside 0..{num_classes - 1}")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


@dataclass
class FoldMetrics:
    """Percentages to match the reporting convention; None marks undefined metrics."""

    accuracy: float
    recall: list  # per class, None if the class has no true samples
    f1: list      # per class, None if recall or precision is undefined
    support: list
    undefined: list = field(default_factory=list)

    def as_dict(self):
        return {
            "accuracy": self.accuracy,
            "recall": self.recall,
            "f1": self.f1,
            "support": self.support,
            "undefined": self.undefined,
        }


def per_class_metrics(cm: np.ndarray) -> FoldMetrics:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.sum() == 0:
        raise EvaluationError(f"invalid confusion matrix shape {cm.shape}")
    n = cm.sum()
    accuracy = 100.0 * np.trace(cm) / n
    recall, f1, undefined = [], [], []
    row = cm.sum(axis=1)
    col = cm.sum(axis=0)
    for k in range(cm.shape[0]):
        if row[k] == 0:
            recall.append(None)
            undefined.append(f"recall[{k}]: no true samples")
        else:
            recall.append(100.0 * cm[k, k] / row[k])
        if row[k] == 0 or col[k] == 0:
            f1.append(None)
            undefined.append(f"f1[{k}]: empty row or column")
        else:
            precision = cm[k, k] / col[k]
            rec = cm[k, k] / row[k]
            f1.append(0.0 if precision + rec == 0 else 100.0 * 2 * precision * rec / (precision + rec))
    return FoldMetrics(
        accuracy=float(accuracy),
        recall=recall,
        f1=f1,
        support=[int(s) for s in row],
        undefined=undefined,
    )


@dataclass
class MetricsReport:
    variant: str
    folds: list  # FoldMetrics dicts, in fold order
    mean: dict
    std: dict

    def as_dict(self):
        return {"variant": self.variant, "folds": self.folds,
                "mean": self.mean, "std": self.std}


def _mean_std(values):
    values = [v for v in values if v is not None]
    if not values:
        return None, None
    mean = float(np.mean(values))
    std = float(np.std(values))  # population std over the five folds
    return mean, std


def aggregate_folds(fold_metrics: list, variant: str, *, allow_partial: bool = False) -> MetricsReport:
    """Mean and population standard deviation of every metric over five folds."""
    if len(fold_metrics) != 5 and not allow_partial:
        raise EvaluationError(
            f"expected 5 fold reports, got {len(fold_metrics)} (use allow_partial to override)"
        )
    if not fold_metrics:
        raise EvaluationError("no fold reports")
    num_classes = len(fold_metrics[0].recall)
    mean, std = {}, {}
    mean["accuracy"], std["accuracy"] = _mean_std([m.accuracy for m in fold_metrics])
    for k in range(num_classes):
        mean[f"recall_{k}"], std[f"recall_{k}"] = _mean_std([m.recall[k] for m in fold_metrics])
        mean[f"f1_{k}"], std[f"f1_{k}"] = _mean_std([m.f1[k] for m in fold_metrics])
    return MetricsReport(
        variant=variant,
        folds=[m.as_dict() for m in fold_metrics],
        mean=mean,
        std=std,
    )


def format_mean_std(mean, std) -> str:
    """Render one aggregate cell, e.g. '60.9±0.4'."""
    if mean is None:
        return "undefined"
    return f"{mean:.1f}±{std:.1f}"


def render_table(report: MetricsReport, class_names: list) -> str:
    lines = [f"Variant: {report.variant}"]
    lines.append(f"  Accuracy: {format_mean_std(report.mean['accuracy'], report.std['accuracy'])}")
    for k, name in enumerate(class_names):
        recall = format_mean_std(report.mean[f"recall_{k}"], report.std[f"recall_{k}"])
        f1 = format_mean_std(report.mean[f"f1_{k}"], report.std[f"f1_{k}"])
        lines.append(f"  {name:<18} recall {recall:<12} F1 {f1}")
    return "\n".join(lines)


def save_report(report: MetricsReport, path) -> None:
    Path(path).write_text(json.dumps(report.as_dict(), indent=2) + "\n", encoding="utf-8")


def load_report(path) -> MetricsReport:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return MetricsReport(**payload)
