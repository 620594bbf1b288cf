"""Confusion matrix and the accuracy / precision / recall / F1 family.

Macro precision and recall are plain means over the grades.  The macro F1
reported as ``f1_macro`` is the harmonic mean of those two macro values; the
mean of per-grade F1 scores is reported alongside as
``f1_macro_mean_of_class``.  Any 0/0 ratio counts as 0.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import N_CLASSES
from .errors import DataError


class UndefinedMetricWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """``counts[true, predicted]``."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError("confusion matrix must be square")
        if (c < 0).any():
            raise ValueError("confusion counts must be non-negative")
        object.__setattr__(self, "counts", c)

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float


def confusion_matrix(truth, pred, n_classes: int = N_CLASSES) -> ConfusionMatrix:
    t = np.asarray(truth, dtype=np.int64).ravel()
    p = np.asarray(pred, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise DataError(f"truth has {t.size} entries but predictions have {p.size}")
    for name, v in (("truth", t), ("prediction", p)):
        if v.size and (v.min() < 0 or v.max() >= n_classes):
            raise DataError(f"{name} grade outside 0..{n_classes - 1}")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


def _ratio(num, den, what):
    if den == 0:
        warnings.warn(f"{what} is 0/0; reported as 0", UndefinedMetricWarning, stacklevel=3)
        return 0.0
    return num / den


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise DataError("accuracy of an empty confusion matrix")
    return float(np.trace(cm.counts)) / cm.total


def micro_recall(cm: ConfusionMatrix) -> float:
    tp = np.diag(cm.counts).sum()
    fn = cm.counts.sum() - tp
    if tp + fn == 0:
        raise DataError("micro recall of an empty confusion matrix")
    return float(tp) / float(tp + fn)


def per_class_prf(cm: ConfusionMatrix, grade: int) -> PRF:
    tp = int(cm.counts[grade, grade])
    fp = int(cm.counts[:, grade].sum()) - tp
    fn = int(cm.counts[grade, :].sum()) - tp
    precision = _ratio(tp, tp + fp, f"precision of grade {grade}")
    recall = _ratio(tp, tp + fn, f"recall of grade {grade}")
    f1 = _ratio(2 * precision * recall, precision + recall, f"F1 of grade {grade}")
    return PRF(precision, recall, f1)


def macro_metrics(cm: ConfusionMatrix) -> dict[str, float]:
    per = [per_class_prf(cm, c) for c in range(cm.n_classes)]
    n = cm.n_classes
    p = sum(x.precision for x in per) / n
    r = sum(x.recall for x in per) / n
    return {
        "precision_macro": p,
        "recall_macro": r,
        "f1_macro": _ratio(2 * p * r, p + r, "macro F1"),
        "f1_macro_mean_of_class": sum(x.f1 for x in per) / n,
    }


def summary(cm: ConfusionMatrix) -> dict[str, float]:
    out = {"accuracy": accuracy(cm)}
    out.update(macro_metrics(cm))
    return out


# -------------------------------------------------------------------- I/O


def write_confusion_csv(cm: ConfusionMatrix, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred"] + [str(c) for c in range(cm.n_classes)])
        for c in range(cm.n_classes):
            w.writerow([str(c)] + [str(int(v)) for v in cm.counts[c]])


def read_confusion_csv(path) -> ConfusionMatrix:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty confusion CSV")
    n = len(rows[0]) - 1
    body = rows[1:]
    if len(body) != n or any(len(r) != n + 1 for r in body):
        raise DataError(f"{path}: expected {n} rows of {n + 1} cells")
    try:
        return ConfusionMatrix(np.array([[int(v) for v in r[1:]] for r in body]))
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def format_report(cm: ConfusionMatrix) -> str:
    """Headline table (accuracy, precision, recall, F1) plus a per-grade breakdown."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UndefinedMetricWarning)
        s = summary(cm)
    lines = [
        f"{'accuracy':>10} {'precision':>10} {'recall':>10} {'F1':>10}",
        f"{s['accuracy']:>10.4%} {s['precision_macro']:>10.4%} "
        f"{s['recall_macro']:>10.4%} {s['f1_macro']:>10.4%}",
        "",
        f"{'grade':>5} {'support':>8} {'precision':>10} {'recall':>10} {'F1':>10}",
    ]
    for c in range(cm.n_classes):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UndefinedMetricWarning)
            prf = per_class_prf(cm, c)
        support = int(cm.counts[c].sum())
        lines.append(f"{c:>5} {support:>8} {prf.precision:>10.4f} {prf.recall:>10.4f} "
                     f"{prf.f1:>10.4f}")
    lines.append("")
    lines.append(f"mean of per-grade F1: {s['f1_macro_mean_of_class']:.6f}")
    return "\n".join(lines) + "\n"
