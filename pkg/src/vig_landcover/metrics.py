"""
Decision rules and confusion-count metrics.

Multiclass predictions are class indices; multilabel predictions are
boolean/0-1 matrices [B, N]. A metric whose denominator is zero is 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

SCORE_KEYS = ("precision", "recall", "f1")


def decide_labels(probs, task: str, t: float = 0.5) -> np.ndarray:
    """Argmax (ties -> lowest index) for multiclass, strict ``p > t`` for multilabel."""
    p = np.asarray(probs.data if hasattr(probs, "data") else probs)
    if task == "multiclass":
        return p.argmax(axis=-1)
    if task == "multilabel":
        return p > t
    raise DataError(f"unknown task {task!r}")


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray
    task: str
    num_samples: int

    @property
    def num_classes(self) -> int:
        return len(self.tp)

    def merge(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                               self.tn + other.tn, self.task, self.num_samples + other.num_samples)


def _as_matrix(labels, num_classes: int, what: str) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim == 1:
        idx = arr.astype(np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= num_classes):
            raise DataError(f"{what} label out of range [0, {num_classes})")
        out = np.zeros((idx.size, num_classes), dtype=bool)
        out[np.arange(idx.size), idx] = True
        return out
    if arr.ndim == 2:
        if arr.shape[1] != num_classes:
            raise DataError(f"{what} has {arr.shape[1]} columns, expected {num_classes}")
        if not np.all((arr == 0) | (arr == 1)):
            raise DataError(f"{what} multi-hot entries must be 0/1")
        return arr.astype(bool)
    raise DataError(f"{what} must be class indices [B] or a multi-hot matrix [B, N]")


def confusion_counts(pred, truth, num_classes: int, task: str = None) -> ConfusionCounts:
    """Per-class one-vs-rest counts. Index vectors mean multiclass, matrices multilabel."""
    if task is None:
        task = "multiclass" if np.asarray(truth).ndim == 1 else "multilabel"
    p = _as_matrix(pred, num_classes, "prediction")
    t = _as_matrix(truth, num_classes, "truth")
    if p.shape != t.shape:
        raise DataError(f"prediction shape {p.shape} != truth shape {t.shape}")
    tp = (p & t).sum(axis=0)
    fp = (p & ~t).sum(axis=0)
    fn = (~p & t).sum(axis=0)
    tn = (~p & ~t).sum(axis=0)
    return ConfusionCounts(tp, fp, fn, tn, task, len(t))


def _ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def _f1(tp, fp, fn):
    # same value as 2PR/(P+R) but a single rounding, so P == R implies F1 == P exactly
    return _ratio(2 * np.asarray(tp), 2 * np.asarray(tp) + fp + fn)


def per_class_scores(counts: ConfusionCounts) -> dict:
    precision = _ratio(counts.tp, counts.tp + counts.fp)
    recall = _ratio(counts.tp, counts.tp + counts.fn)
    f1 = _f1(counts.tp, counts.fp, counts.fn)
    return {"precision": precision, "recall": recall, "f1": f1}


def accuracy(counts: ConfusionCounts) -> float:
    """Fraction of correct samples (multiclass) or of correct per-class decisions (multilabel)."""
    if counts.task == "multiclass":
        return float(_ratio(counts.tp.sum(), counts.num_samples))
    decisions = counts.tp.sum() + counts.fp.sum() + counts.fn.sum() + counts.tn.sum()
    return float(_ratio(counts.tp.sum() + counts.tn.sum(), decisions))


def aggregate(counts: ConfusionCounts, mode: str) -> dict:
    """precision / recall / f1 / accuracy, micro (pooled counts) or macro (class mean)."""
    if mode == "micro":
        tp, fp, fn = counts.tp.sum(), counts.fp.sum(), counts.fn.sum()
        p = float(_ratio(tp, tp + fp))
        r = float(_ratio(tp, tp + fn))
        f1 = float(_f1(tp, fp, fn))
    elif mode == "macro":
        scores = per_class_scores(counts)
        p, r, f1 = (float(scores[k].mean()) for k in SCORE_KEYS)
    else:
        raise DataError(f"unknown averaging mode {mode!r}")
    return {"precision": p, "recall": r, "f1": f1, "accuracy": accuracy(counts)}


def per_class_extremes(counts: ConfusionCounts) -> dict:
    scores = per_class_scores(counts)
    out = {}
    for key in SCORE_KEYS:
        out[f"max_{key}"] = float(scores[key].max())
        out[f"min_{key}"] = float(scores[key].min())
    return out


# column name -> key in MetricReport.values
TABLE_COLUMNS = {
    "F1": "f1", "Precision": "precision", "Recall": "recall", "Accuracy": "accuracy",
    "MaxF1": "max_f1", "MinF1": "min_f1", "MaxPrec": "max_precision",
    "MinPrec": "min_precision", "MaxRec": "max_recall", "MinRec": "min_recall",
}


@dataclass
class MetricReport:
    mode: str
    values: dict
    per_class: dict = field(default_factory=dict)
    counts: ConfusionCounts = None

    def to_kv(self) -> str:
        lines = [f"mode={self.mode}"]
        for col, key in TABLE_COLUMNS.items():
            if key in self.values:
                lines.append(f"{col}={self.values[key]:.6f}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        cols = [c for c, k in TABLE_COLUMNS.items() if k in self.values]
        width = max(9, max(len(c) for c in cols) + 2)
        head = f"{self.mode} averaging\n" + "".join(f"{c:>{width}}" for c in cols)
        row = "".join(f"{100 * self.values[TABLE_COLUMNS[c]]:>{width}.2f}" for c in cols)
        lines = [head, row, "", f"{'class':>6}{'tp':>8}{'fp':>8}{'fn':>8}{'tn':>8}"
                 f"{'Precision':>11}{'Recall':>9}{'F1':>9}"]
        if self.counts is not None:
            c = self.counts
            for i in range(c.num_classes):
                lines.append(
                    f"{i:>6}{c.tp[i]:>8}{c.fp[i]:>8}{c.fn[i]:>8}{c.tn[i]:>8}"
                    f"{100 * self.per_class['precision'][i]:>11.2f}"
                    f"{100 * self.per_class['recall'][i]:>9.2f}{100 * self.per_class['f1'][i]:>9.2f}"
                )
        return "\n".join(lines) + "\n"


def metric_report(counts: ConfusionCounts, mode: str = None) -> MetricReport:
    """Full report; default mode is macro for multiclass and micro for multilabel.

    Per-class extremes are included for every mode.
    """
    mode = mode or ("macro" if counts.task == "multiclass" else "micro")
    values = aggregate(counts, mode)
    values.update(per_class_extremes(counts))
    return MetricReport(mode, values, per_class_scores(counts), counts)


def parse_kv(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        key, sep, value = line.partition("=")
        if sep and key != "mode":
            out[key] = float(value)
    return out
