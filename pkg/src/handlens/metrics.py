"""Confusion matrix and the derived precision/recall/error-rate reporting.

Rows are true classes, columns are predicted classes. Macro averages are
unweighted arithmetic means over classes. A class that never gets
predicted has undefined precision; the policy is to report 0.0 with an
explicit undefined flag rather than a silent NaN. Values are kept at full
precision internally and rounded to 4 decimals only at presentation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ConfusionMatrix",
    "ClassMetrics",
    "MetricsReport",
    "confusion",
    "error_rate",
    "precision",
    "recall",
    "macro_average",
    "report_from_confusion",
    "sum_confusions",
    "cv_aggregate",
    "format_report",
    "format_confusion",
]


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray                 # (K, K) int64
    class_names: tuple[str, ...]

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(preds, labels, k: int,
              class_names: tuple[str, ...] | None = None) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1 or preds.size < 1:
        raise ValueError(
            f"need equal-length non-empty 1-d arrays, got {preds.shape} "
            f"vs {labels.shape}")
    for name, arr in (("preds", preds), ("labels", labels)):
        if arr.min() < 0 or arr.max() >= k:
            raise ValueError(f"{name} outside [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    if class_names is None:
        class_names = tuple(f"class{i}" for i in range(k))
    if len(class_names) != k:
        raise ValueError(f"{len(class_names)} names for {k} classes")
    return ConfusionMatrix(counts, tuple(class_names))


def error_rate(cm: ConfusionMatrix) -> float:
    """Misclassified fraction: (total - trace) / total."""
    total = cm.total
    if total < 1:
        raise ValueError("empty confusion matrix")
    return float((total - np.trace(cm.counts)) / total)


def precision(cm: ConfusionMatrix, c: int) -> float:
    """TP / (TP + FP) over the class's column; 0.0 when nothing was predicted."""
    column = int(cm.counts[:, c].sum())
    if column == 0:
        return 0.0
    return float(cm.counts[c, c] / column)


def recall(cm: ConfusionMatrix, c: int) -> float:
    """TP / (TP + FN) over the class's row; 0.0 when the class has no samples."""
    row = int(cm.counts[c, :].sum())
    if row == 0:
        return 0.0
    return float(cm.counts[c, c] / row)


def macro_average(values) -> float:
    values = list(values)
    if not values:
        raise ValueError("macro average of an empty list")
    return float(sum(values) / len(values))


@dataclass(frozen=True)
class ClassMetrics:
    name: str
    precision: float
    recall: float
    precision_defined: bool = True
    recall_defined: bool = True


@dataclass(frozen=True)
class MetricsReport:
    error_rate: float
    accuracy: float                      # always exactly 1 - error_rate
    per_class: tuple[ClassMetrics, ...]
    macro_precision: float
    macro_recall: float

    @property
    def k(self) -> int:
        return len(self.per_class)


def report_from_confusion(cm: ConfusionMatrix) -> MetricsReport:
    err = error_rate(cm)
    per_class = []
    for c in range(cm.k):
        per_class.append(ClassMetrics(
            name=cm.class_names[c],
            precision=precision(cm, c),
            recall=recall(cm, c),
            precision_defined=int(cm.counts[:, c].sum()) > 0,
            recall_defined=int(cm.counts[c, :].sum()) > 0,
        ))
    return MetricsReport(
        error_rate=err,
        accuracy=1.0 - err,
        per_class=tuple(per_class),
        macro_precision=macro_average(m.precision for m in per_class),
        macro_recall=macro_average(m.recall for m in per_class),
    )


def sum_confusions(matrices: list[ConfusionMatrix]) -> ConfusionMatrix:
    """Pooled view across folds: cellwise sum of the K x K counts."""
    if not matrices:
        raise ValueError("no confusion matrices to sum")
    first = matrices[0]
    for m in matrices[1:]:
        if m.k != first.k or m.class_names != first.class_names:
            raise ValueError("confusion matrices disagree on classes")
    return ConfusionMatrix(sum(m.counts for m in matrices), first.class_names)


def cv_aggregate(reports: list[MetricsReport]) -> MetricsReport:
    """Unweighted mean of every metric across fold reports.

    The accuracy of the aggregate is recomputed as 1 - mean error rate so
    the identity survives aggregation. A per-class flag stays defined only
    if it was defined in every fold.
    """
    if not reports:
        raise ValueError("no fold reports to aggregate")
    k = reports[0].k
    names = tuple(m.name for m in reports[0].per_class)
    for r in reports[1:]:
        if r.k != k or tuple(m.name for m in r.per_class) != names:
            raise ValueError("fold reports disagree on classes")
    n = len(reports)
    err = sum(r.error_rate for r in reports) / n
    per_class = tuple(
        ClassMetrics(
            name=names[c],
            precision=sum(r.per_class[c].precision for r in reports) / n,
            recall=sum(r.per_class[c].recall for r in reports) / n,
            precision_defined=all(r.per_class[c].precision_defined for r in reports),
            recall_defined=all(r.per_class[c].recall_defined for r in reports),
        )
        for c in range(k))
    return MetricsReport(
        error_rate=err,
        accuracy=1.0 - err,
        per_class=per_class,
        macro_precision=sum(r.macro_precision for r in reports) / n,
        macro_recall=sum(r.macro_recall for r in reports) / n,
    )


def format_report(report: MetricsReport,
                  config_lines: list[str] | None = None) -> str:
    """Per-class table plus the summary block, 4-decimal presentation."""
    lines = ["# handlens metrics report v1"]
    for raw in config_lines or []:
        lines.append(f"# config: {raw}")
    width = max((len(m.name) for m in report.per_class), default=5)
    lines.append(f"{'class':<{width}}\tprecision\trecall")
    for m in report.per_class:
        p = f"{m.precision:.4f}" + ("" if m.precision_defined else " (undefined)")
        r = f"{m.recall:.4f}" + ("" if m.recall_defined else " (undefined)")
        lines.append(f"{m.name:<{width}}\t{p}\t{r}")
    lines.append("")
    lines.append(f"error_rate\t{report.error_rate:.4f}")
    lines.append(f"accuracy\t{report.accuracy:.4f}")
    lines.append(f"macro_precision\t{report.macro_precision:.4f}")
    lines.append(f"macro_recall\t{report.macro_recall:.4f}")
    return "\n".join(lines) + "\n"


def format_confusion(cm: ConfusionMatrix,
                     config_lines: list[str] | None = None) -> str:
    """K x K grid with class-name header row and column, tab separated."""
    lines = ["# handlens confusion matrix v1  (rows: true, columns: predicted)"]
    for raw in config_lines or []:
        lines.append(f"# config: {raw}")
    lines.append("\t".join(["true\\pred", *cm.class_names]))
    for c in range(cm.k):
        row = [cm.class_names[c]] + [str(int(v)) for v in cm.counts[c]]
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"
