"""Ranking and threshold metrics, and fold-level aggregation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

__all__ = ["UndefinedMetricError", "auc", "auprc", "f1", "MetricsReport", "METRIC_NAMES"]

METRIC_NAMES = ("auc", "auprc", "f1")


class UndefinedMetricError(ValueError):
    """The metric has no value for this label set (e.g. a single class)."""


def _as_binary(labels) -> np.ndarray:
    y = np.asarray(labels)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return y.astype(bool)


def auc(scores, labels) -> float:
    """Area under the ROC curve as the Mann-Whitney statistic.

    Equals ``(#(pos > neg) + 0.5 * #(pos == neg)) / (P * N)`` over all
    positive/negative pairs.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = _as_binary(labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(s)  # average ranks, so ties count one half
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Non-interpolated average precision: sum over distinct thresholds of
    (recall step) x (precision at that threshold)."""
    s = np.asarray(scores, dtype=np.float64)
    y = _as_binary(labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPRC needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / n_pos
    steps = np.diff(np.r_[0.0, recall])
    return float(np.sum(steps * precision))


def f1(scores, labels, threshold: float = 0.5) -> float:
    """F1 of ``score >= threshold``; 0 when nothing is predicted or nothing is positive."""
    s = np.asarray(scores, dtype=np.float64)
    y = _as_binary(labels)
    pred = s >= threshold
    tp = int(np.sum(pred & y))
    n_pred, n_true = int(pred.sum()), int(y.sum())
    if n_pred == 0 or n_true == 0 or tp == 0:
        return 0.0
    precision, recall = tp / n_pred, tp / n_true
    return 2 * precision * recall / (precision + recall)


def _safe(metric, scores, labels, degenerate_as_half: bool) -> float:
    try:
        return metric(scores, labels)
    except UndefinedMetricError:
        if degenerate_as_half and metric is auc:
            return 0.5
        return math.nan


@dataclass
class MetricsReport:
    """Per-fold, per-class metrics with fold mean and standard deviation.

    Undefined values are stored as NaN, left out of macro averages and listed
    in ``undefined``.  The standard deviation is the population one (ddof=0)
    over the folds.
    """

    task: str
    classes: list
    per_fold: list = field(default_factory=list)  # fold -> {class -> {metric -> value}}
    undefined: list = field(default_factory=list)

    @classmethod
    def from_predictions(cls, task: str, classes: Sequence[str], fold_scores: Sequence[np.ndarray],
                         fold_labels: Sequence[np.ndarray], threshold: float = 0.5,
                         degenerate_as_half: bool = False) -> "MetricsReport":
        """``fold_scores[f]`` and ``fold_labels[f]`` are (n_samples, n_classes) arrays."""
        report = cls(task, list(classes))
        for f, (scores, labels) in enumerate(zip(fold_scores, fold_labels)):
            scores, labels = np.atleast_2d(scores), np.atleast_2d(labels)
            fold = {}
            for c, name in enumerate(classes):
                vals = {
                    "auc": _safe(auc, scores[:, c], labels[:, c], degenerate_as_half),
                    "auprc": _safe(auprc, scores[:, c], labels[:, c], False),
                    "f1": f1(scores[:, c], labels[:, c], threshold),
                }
                for m, v in vals.items():
                    if math.isnan(v):
                        report.undefined.append((f, name, m))
                fold[name] = vals
            report.per_fold.append(fold)
        return report

    @property
    def n_folds(self) -> int:
        return len(self.per_fold)

    def fold_values(self, metric: str, cls_name: str | None = None) -> np.ndarray:
        """Per-fold values of one class, or of the macro average when ``cls_name`` is None."""
        out = []
        for fold in self.per_fold:
            if cls_name is None:
                vals = [fold[c][metric] for c in self.classes if not math.isnan(fold[c][metric])]
                out.append(float(np.mean(vals)) if vals else math.nan)
            else:
                out.append(fold[cls_name][metric])
        return np.array(out)

    def mean_std(self, metric: str, cls_name: str | None = None) -> tuple[float, float]:
        v = self.fold_values(metric, cls_name)
        v = v[~np.isnan(v)]
        if v.size == 0:
            return math.nan, math.nan
        return float(v.mean()), float(v.std())

    def macro(self, metric: str = "auc") -> float:
        return self.mean_std(metric)[0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "class", "fold", *METRIC_NAMES])
        for f, fold in enumerate(self.per_fold):
            for c in self.classes:
                w.writerow([self.task, c, f, *(repr(fold[c][m]) for m in METRIC_NAMES)])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "class", "metric", "mean", "std", "n_folds"])
        for c in [*self.classes, "macro"]:
            for m in METRIC_NAMES:
                mean, std = self.mean_std(m, None if c == "macro" else c)
                w.writerow([self.task, c, m, repr(mean), repr(std), self.n_folds])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise ValueError("empty metrics CSV")
        classes = list(dict.fromkeys(r["class"] for r in rows))
        n_folds = max(int(r["fold"]) for r in rows) + 1
        report = cls(rows[0]["task"], classes, [dict() for _ in range(n_folds)])
        for r in rows:
            vals = {m: float(r[m]) for m in METRIC_NAMES}
            report.per_fold[int(r["fold"])][r["class"]] = vals
            for m, v in vals.items():
                if math.isnan(v):
                    report.undefined.append((int(r["fold"]), r["class"], m))
        return report
