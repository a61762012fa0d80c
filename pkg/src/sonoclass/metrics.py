"""Confusion-matrix accumulation and every reported metric.

A confusion matrix stores integer counts with rows = true class and columns
= predicted class.  Per-class scores use one-vs-rest counts; the per-class
"diagonal accuracy" is the row-normalized diagonal, which coincides with
recall.  Reports render to JSON, CSV, or markdown with deterministic field
order.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MetricsError",
    "ConfusionMatrix",
    "PerClassMetrics",
    "MetricsReport",
    "confusion_accumulate",
    "merge_matrices",
    "binary_counts",
    "precision_recall_f1",
    "per_class_diagonal_accuracy",
    "one_vs_rest_accuracy",
    "overall_metrics",
    "report_emit",
    "matrix_to_csv",
    "matrix_from_csv",
]


class MetricsError(ValueError):
    """Raised for malformed matrices or unknown report formats."""


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # (K, K) nonnegative integers
    class_names: tuple[str, ...]

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise MetricsError(f"confusion matrix must be square, got {counts.shape}")
        if not np.issubdtype(counts.dtype, np.integer):
            if not np.all(counts == np.rint(counts)):
                raise MetricsError("confusion matrix entries must be integers")
            counts = np.rint(counts).astype(np.int64)
        else:
            counts = counts.astype(np.int64)
        if np.any(counts < 0):
            raise MetricsError("confusion matrix entries must be nonnegative")
        names = tuple(self.class_names)
        if len(names) != counts.shape[0]:
            raise MetricsError(
                f"{len(names)} class names do not match matrix size {counts.shape[0]}"
            )
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "class_names", names)

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return merge_matrices(self, other)


def confusion_accumulate(preds, labels, n_classes: int, class_names=None) -> ConfusionMatrix:
    """Count (true, predicted) pairs into a K x K matrix."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise MetricsError(
            f"predictions {preds.shape} and labels {labels.shape} must be "
            "equal-length vectors"
        )
    if preds.size and not (
        0 <= preds.min() and preds.max() < n_classes and 0 <= labels.min() and labels.max() < n_classes
    ):
        raise MetricsError(f"indices out of range for {n_classes} classes")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    if class_names is None:
        class_names = tuple(f"class_{k}" for k in range(n_classes))
    return ConfusionMatrix(counts, tuple(class_names))


def merge_matrices(a: ConfusionMatrix, b: ConfusionMatrix) -> ConfusionMatrix:
    """Cell-wise sum; associative, enabling parallel shards."""
    if a.class_names != b.class_names:
        raise MetricsError("cannot merge matrices with different class names")
    return ConfusionMatrix(a.counts + b.counts, a.class_names)


def binary_counts(matrix: ConfusionMatrix, k: int) -> tuple[int, int, int, int]:
    """One-vs-rest (TP, TN, FP, FN) for class ``k``."""
    counts = matrix.counts
    tp = int(counts[k, k])
    fp = int(counts[:, k].sum()) - tp
    fn = int(counts[k, :].sum()) - tp
    tn = matrix.total - tp - fp - fn
    return tp, tn, fp, fn


def precision_recall_f1(matrix: ConfusionMatrix, k: int) -> tuple[float, float, float]:
    """Precision, recall, F1 for class ``k``; degenerate denominators give 0."""
    tp, _, fp, fn = binary_counts(matrix, k)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def per_class_diagonal_accuracy(matrix: ConfusionMatrix) -> np.ndarray:
    """Row-normalized diagonal (identically per-class recall)."""
    rows = matrix.counts.sum(axis=1)
    empty = rows == 0
    if np.any(empty):
        warnings.warn(
            f"{int(empty.sum())} class(es) have no true samples; "
            "their diagonal accuracy is reported as 0"
        )
    safe = np.where(empty, 1, rows)
    return np.where(empty, 0.0, np.diag(matrix.counts) / safe)


def one_vs_rest_accuracy(matrix: ConfusionMatrix, k: int) -> float:
    """(TP + TN) / total for class ``k`` against the rest."""
    tp, tn, fp, fn = binary_counts(matrix, k)
    return (tp + tn) / matrix.total


@dataclass(frozen=True)
class PerClassMetrics:
    name: str
    precision: float
    recall: float
    f1: float
    diagonal_accuracy: float
    one_vs_rest_accuracy: float
    support: int


@dataclass(frozen=True)
class MetricsReport:
    overall_accuracy: float
    macro_f1: float
    weighted_f1: float
    per_class: tuple[PerClassMetrics, ...]
    matrix: ConfusionMatrix
    architecture: str = ""
    loss_name: str = ""
    focus_class: str = ""

    @property
    def focus_accuracy(self) -> float:
        for pc in self.per_class:
            if pc.name == self.focus_class:
                return pc.diagonal_accuracy
        return float("nan")


def overall_metrics(
    matrix: ConfusionMatrix,
    architecture: str = "",
    loss_name: str = "",
    focus_class: str = "",
) -> MetricsReport:
    """Full report: overall accuracy, macro and weighted F1, per-class rows."""
    if matrix.total == 0:
        raise MetricsError("cannot compute metrics for an empty matrix")
    diag_acc = per_class_diagonal_accuracy(matrix)
    supports = matrix.counts.sum(axis=1)
    per_class = []
    f1s = []
    for k, name in enumerate(matrix.class_names):
        precision, recall, f1 = precision_recall_f1(matrix, k)
        per_class.append(
            PerClassMetrics(
                name=name,
                precision=precision,
                recall=recall,
                f1=f1,
                diagonal_accuracy=float(diag_acc[k]),
                one_vs_rest_accuracy=one_vs_rest_accuracy(matrix, k),
                support=int(supports[k]),
            )
        )
        f1s.append(f1)
    f1s = np.array(f1s)
    weighted = float((f1s * supports).sum() / supports.sum()) if supports.sum() else 0.0
    return MetricsReport(
        overall_accuracy=float(np.trace(matrix.counts) / matrix.total),
        macro_f1=float(f1s.mean()),
        weighted_f1=weighted,
        per_class=tuple(per_class),
        matrix=matrix,
        architecture=architecture,
        loss_name=loss_name,
        focus_class=focus_class,
    )


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _report_dict(report: MetricsReport) -> dict:
    return {
        "architecture": report.architecture,
        "loss": report.loss_name,
        "overall_accuracy": report.overall_accuracy,
        "macro_f1": report.macro_f1,
        "weighted_f1": report.weighted_f1,
        "focus_class": report.focus_class,
        "per_class": [
            {
                "name": pc.name,
                "precision": pc.precision,
                "recall": pc.recall,
                "f1": pc.f1,
                "diagonal_accuracy": pc.diagonal_accuracy,
                "one_vs_rest_accuracy": pc.one_vs_rest_accuracy,
                "support": pc.support,
            }
            for pc in report.per_class
        ],
        "confusion_matrix": {
            "class_names": list(report.matrix.class_names),
            "counts": report.matrix.counts.tolist(),
        },
    }


def report_from_dict(payload: dict) -> MetricsReport:
    """Inverse of the JSON emission."""
    matrix = ConfusionMatrix(
        np.array(payload["confusion_matrix"]["counts"], dtype=np.int64),
        tuple(payload["confusion_matrix"]["class_names"]),
    )
    per_class = tuple(
        PerClassMetrics(
            name=pc["name"],
            precision=pc["precision"],
            recall=pc["recall"],
            f1=pc["f1"],
            diagonal_accuracy=pc["diagonal_accuracy"],
            one_vs_rest_accuracy=pc["one_vs_rest_accuracy"],
            support=pc["support"],
        )
        for pc in payload["per_class"]
    )
    return MetricsReport(
        overall_accuracy=payload["overall_accuracy"],
        macro_f1=payload["macro_f1"],
        weighted_f1=payload["weighted_f1"],
        per_class=per_class,
        matrix=matrix,
        architecture=payload.get("architecture", ""),
        loss_name=payload.get("loss", ""),
        focus_class=payload.get("focus_class", ""),
    )


def _pct(x: float) -> str:
    return f"{round(x * 100)}%"


def _emit_markdown(report: MetricsReport) -> str:
    lines = ["# Classification report", ""]
    focus = report.focus_class or report.per_class[-1].name
    focus_acc = report.focus_accuracy
    if np.isnan(focus_acc):
        focus_acc = report.per_class[-1].diagonal_accuracy
        focus = report.per_class[-1].name
    lines += [
        "## Summary",
        "",
        f"| Architecture | Loss | Accuracy | F1 | {focus} accuracy |",
        "| --- | --- | --- | --- | --- |",
        f"| {report.architecture or 'n/a'} | {report.loss_name or 'n/a'} "
        f"| {_pct(report.overall_accuracy)} | {report.weighted_f1:.2f} "
        f"| {_pct(focus_acc)} |",
        "",
        f"(macro F1 {report.macro_f1:.2f}, weighted F1 {report.weighted_f1:.2f})",
        "",
        "## Per-class accuracy",
        "",
        "| Class | Accuracy (%) |",
        "| --- | --- |",
    ]
    for pc in report.per_class:
        lines.append(f"| {pc.name} | {round(pc.diagonal_accuracy * 100)} |")
    lines.append("")
    return "\n".join(lines)


def _emit_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["class", "precision", "recall", "f1", "diagonal_accuracy",
         "one_vs_rest_accuracy", "support"]
    )
    for pc in report.per_class:
        writer.writerow(
            [pc.name, repr(pc.precision), repr(pc.recall), repr(pc.f1),
             repr(pc.diagonal_accuracy), repr(pc.one_vs_rest_accuracy), pc.support]
        )
    writer.writerow([])
    writer.writerow(["overall_accuracy", repr(report.overall_accuracy)])
    writer.writerow(["macro_f1", repr(report.macro_f1)])
    writer.writerow(["weighted_f1", repr(report.weighted_f1)])
    return buf.getvalue()


def report_emit(report: MetricsReport, fmt: str = "json") -> str:
    """Render a report as ``json``, ``csv``, or ``markdown``."""
    if fmt == "json":
        return json.dumps(_report_dict(report), indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        return _emit_csv(report)
    if fmt == "markdown":
        return _emit_markdown(report)
    raise MetricsError(f"unknown report format {fmt!r}")


def matrix_to_csv(matrix: ConfusionMatrix) -> str:
    """Matrix CSV with a class-name header row and column."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["true\\pred", *matrix.class_names])
    for name, row in zip(matrix.class_names, matrix.counts):
        writer.writerow([name, *row.tolist()])
    return buf.getvalue()


def matrix_from_csv(text: str) -> ConfusionMatrix:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0][0] != "true\\pred":
        raise MetricsError("matrix CSV must start with a 'true\\pred' header")
    names = tuple(rows[0][1:])
    counts = np.array([[int(v) for v in row[1:]] for row in rows[1 : 1 + len(names)]])
    return ConfusionMatrix(counts, names)
