"""Challenge metrics: overall accuracy and mean per-class accuracy."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError


@dataclass(frozen=True, eq=False)
class EvalResult:
    mean_acc_all: float
    mean_acc_classes: float
    per_class_acc: np.ndarray  # NaN for classes absent from the truth
    confusion: np.ndarray  # confusion[true, pred]

    def to_dict(self) -> dict:
        return {
            "mean_acc_all": self.mean_acc_all,
            "mean_acc_classes": self.mean_acc_classes,
            "per_class_acc": [None if np.isnan(v) else float(v) for v in self.per_class_acc],
            "support": [int(v) for v in self.confusion.sum(axis=1)],
            "confusion": self.confusion.tolist(),
            "note": "classes without true samples are excluded from mean_acc_classes",
        }


def confusion_matrix(pred, true, class_count: int) -> np.ndarray:
    cm = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def evaluate(pred_labels, true_labels, class_count: int) -> EvalResult:
    pred = np.asarray(pred_labels, dtype=np.int64)
    true = np.asarray(true_labels, dtype=np.int64)
    if pred.shape != true.shape or pred.ndim != 1:
        raise DimensionError(f"prediction shape {pred.shape} != truth shape {true.shape}")
    if pred.size == 0:
        raise ContractError("cannot evaluate an empty prediction set")
    for name, v in (("prediction", pred), ("truth", true)):
        if ((v < 0) | (v >= class_count)).any():
            raise ContractError(f"{name} labels must lie in [0, {class_count})")
    cm = confusion_matrix(pred, true, class_count)
    support = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(support > 0, np.diag(cm) / support, np.nan)
    return EvalResult(
        mean_acc_all=float(np.trace(cm) / cm.sum()),
        mean_acc_classes=float(np.nanmean(per_class)),
        per_class_acc=per_class,
        confusion=cm,
    )


def evaluate_probs(probs, true_labels) -> EvalResult:
    p = np.asarray(probs)
    return evaluate(p.argmax(axis=1), true_labels, p.shape[1])


def format_summary(result: EvalResult) -> str:
    return f"mean_acc_all {result.mean_acc_all:.4f}\nmean_acc_classes {result.mean_acc_classes:.4f}"


def write_report(result: EvalResult, path) -> None:
    Path(path).write_text(json.dumps(result.to_dict(), indent=2) + "\n")
