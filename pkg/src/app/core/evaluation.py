"""Confusion matrices, precision/recall/F1 and cross-validation summaries.

A 0/0 precision or recall is defined as 0, so a class the model never
predicts (or never sees) scores 0 rather than being skipped.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import math
from typing import Sequence

import numpy as np
import pandas as pd

from app.core.errors import DataError


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise DataError(f"confusion matrix must be square, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise DataError("confusion counts must be >= 0")

    @property
    def num_classes(self) -> int:
        return int(self.counts.shape[0])

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class ClassScore:
    precision: float
    recall: float
    f1: float


@dataclass
class FoldReport:
    per_class: list[ClassScore]
    micro_f1: float
    matrix: ConfusionMatrix
    fold_id: int | None = None

    @property
    def mean_class_f1(self) -> float:
        return float(np.mean([score.f1 for score in self.per_class]))

    @property
    def num_classes(self) -> int:
        return len(self.per_class)


@dataclass(frozen=True)
class MeanSE:
    mean: float
    se: float | None


@dataclass
class CvSummary:
    per_class: list[MeanSE]
    micro: MeanSE
    mean_class: MeanSE
    fold_count: int
    fold_ids: list[int | None] = field(default_factory=list)


def _ratio(numerator: float, denominator: float) -> float:
    return numerator / denominator if denominator else 0.0


def _f1(precision: float, recall: float) -> float:
    return _ratio(2.0 * precision * recall, precision + recall)


def confusion(true_labels: Sequence[int], predictions: Sequence[int], num_classes: int) -> ConfusionMatrix:
    true_labels = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    predictions = np.asarray(predictions, dtype=np.int64).reshape(-1)
    if true_labels.shape != predictions.shape:
        raise DataError(f"{true_labels.size} labels but {predictions.size} predictions")
    for name, values in (("true label", true_labels), ("prediction", predictions)):
        if values.size and (values.min() < 0 or values.max() >= num_classes):
            raise DataError(f"{name} outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (true_labels, predictions), 1)
    return ConfusionMatrix(counts)


def per_class_prf(matrix: ConfusionMatrix) -> list[ClassScore]:
    counts = matrix.counts
    scores = []
    for c in range(matrix.num_classes):
        tp = float(counts[c, c])
        fp = float(counts[:, c].sum()) - tp
        fn = float(counts[c, :].sum()) - tp
        precision = _ratio(tp, tp + fp)
        recall = _ratio(tp, tp + fn)
        scores.append(ClassScore(precision, recall, _f1(precision, recall)))
    return scores


def micro_f1(matrix: ConfusionMatrix) -> float:
    if matrix.total == 0:
        raise DataError("micro-F1 of an empty confusion matrix is undefined")
    counts = matrix.counts
    tp = float(np.trace(counts))
    fp = float(counts.sum()) - tp
    fn = float(counts.sum()) - tp
    return _f1(_ratio(tp, tp + fp), _ratio(tp, tp + fn))


def fold_report(
    true_labels: Sequence[int], predictions: Sequence[int], num_classes: int, fold_id: int | None = None
) -> FoldReport:
    matrix = confusion(true_labels, predictions, num_classes)
    return FoldReport(per_class_prf(matrix), micro_f1(matrix), matrix, fold_id)


def _mean_se(values: Sequence[float]) -> MeanSE:
    values = np.asarray(values, dtype=np.float64)
    se = float(values.std(ddof=1) / math.sqrt(values.size)) if values.size > 1 else None
    return MeanSE(float(values.mean()), se)


def cv_aggregate(folds: Sequence[FoldReport]) -> CvSummary:
    """Mean and standard error (sample std / sqrt(n)) across folds."""
    if not folds:
        raise DataError("no folds to aggregate")
    classes = {fold.num_classes for fold in folds}
    if len(classes) != 1:
        raise DataError(f"folds disagree on the number of classes: {sorted(classes)}")
    k = classes.pop()
    return CvSummary(
        per_class=[_mean_se([fold.per_class[c].f1 for fold in folds]) for c in range(k)],
        micro=_mean_se([fold.micro_f1 for fold in folds]),
        mean_class=_mean_se([fold.mean_class_f1 for fold in folds]),
        fold_count=len(folds),
        fold_ids=[fold.fold_id for fold in folds],
    )


# -- rendering -----------------------------------------------------------------

MICRO_ROW = "average (micro)"
MEAN_CLASS_ROW = "average (class mean)"


def format_mean_se(value: MeanSE) -> str:
    text = f"{100.0 * value.mean:.1f}%"
    if value.se is not None:
        text += f" ± {100.0 * value.se:.1f}%"
    return text


def cv_summary_rows(summary: CvSummary, labels: Sequence[str]) -> list[tuple[str, MeanSE]]:
    """Class rows in label order followed by the two average rows."""
    if len(labels) != len(summary.per_class):
        raise DataError(f"{len(labels)} labels for {len(summary.per_class)} classes")
    rows = list(zip(labels, summary.per_class))
    rows.append((MICRO_ROW, summary.micro))
    rows.append((MEAN_CLASS_ROW, summary.mean_class))
    return rows


def render_table(columns: dict[str, CvSummary], labels: Sequence[str]) -> str:
    """Text table with one "mean ± SE" column per summary."""
    frame = pd.DataFrame({"class": [row for row, _ in cv_summary_rows(next(iter(columns.values())), labels)]})
    for title, summary in columns.items():
        frame[title] = [format_mean_se(value) for _, value in cv_summary_rows(summary, labels)]
    return frame.to_string(index=False)
