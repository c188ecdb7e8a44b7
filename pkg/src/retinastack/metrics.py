"""Rank-statistic AUC, ROC curves, thresholded metrics and macro averaging."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
from scipy.stats import rankdata

from .core import BinaryLabelMatrix
from .errors import DegenerateClass, LengthMismatch, ShapeMismatch

if TYPE_CHECKING:
    from .base_trainer import PredictionMatrix


def _as_pair(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise LengthMismatch(f"{s.size} scores vs {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return s, y.astype(bool)


def auc(scores, labels) -> float:
    """Area under the ROC curve as the normalized Mann-Whitney U statistic.

    Tied scores receive mid-ranks, so every positive/negative tie counts 1/2.
    """
    s, y = _as_pair(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateClass(f"need both classes, got {n_pos} positives and {n_neg} negatives")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist(), self.thresholds.tolist()))

    def trapezoid_area(self) -> float:
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2.0))

    def save_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["fpr", "tpr", "threshold"])
            for f, t, th in self.points:
                writer.writerow([repr(f), repr(t), repr(th)])


def roc_curve(scores, labels) -> RocCurve:
    """One point per distinct score threshold, descending, starting at (0, 0).

    A sample is called positive when its score is >= the threshold; the
    leading point uses threshold +inf.
    """
    s, y = _as_pair(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateClass(f"need both classes, got {n_pos} positives and {n_neg} negatives")
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    y_sorted = y[order]
    # last index of each run of equal scores
    last = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), s.size - 1]
    tp = np.r_[0, np.cumsum(y_sorted)[last]]
    fp = np.r_[0, np.cumsum(~y_sorted)[last]]
    # integer trapezoids: exact up to the final division
    area = float(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])) / (2.0 * n_pos * n_neg))
    return RocCurve(
        fpr=fp / n_neg,
        tpr=tp / n_pos,
        thresholds=np.r_[np.inf, s_sorted[last]],
        auc=area,
    )


@dataclass(frozen=True)
class ClassMetrics:
    auc: float | None
    f1: float
    precision: float
    recall: float
    tp: int
    fp: int
    tn: int
    fn: int
    degenerate: bool


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def class_metrics(scores, labels, threshold: float = 0.5) -> ClassMetrics:
    s, y = _as_pair(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    tn = int(np.sum(~pred & ~y))
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn)
    degenerate = tp + fn == 0 or tn + fp == 0
    return ClassMetrics(
        auc=None if degenerate else auc(s, y),
        f1=f1,
        precision=precision,
        recall=recall,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        degenerate=degenerate,
    )


@dataclass(frozen=True)
class MetricsReport:
    per_class: dict[str, ClassMetrics]
    macro_auc: float
    macro_f1: float
    macro_precision: float
    macro_recall: float
    skipped_labels: tuple[str, ...] = ()
    excluded_labels: tuple[str, ...] = ()
    n_samples: int = 0
    threshold: float = 0.5
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def clean(x):
            return None if isinstance(x, float) and math.isnan(x) else x

        return {
            "n_samples": self.n_samples,
            "threshold": self.threshold,
            "macro": {
                "auc": clean(self.macro_auc),
                "f1": clean(self.macro_f1),
                "precision": clean(self.macro_precision),
                "recall": clean(self.macro_recall),
            },
            "per_class": {lab: asdict(cm) for lab, cm in self.per_class.items()},
            "skipped_labels": list(self.skipped_labels),
            "excluded_labels": list(self.excluded_labels),
            **self.extra,
        }

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _mean(values: list[float]) -> float:
    return float(np.mean(values)) if values else float("nan")


def macro_report(pred: "PredictionMatrix", truth: BinaryLabelMatrix, threshold: float = 0.5) -> MetricsReport:
    """Per-class metrics plus unweighted means over the non-degenerate classes.

    Labels listed in ``truth.excluded`` (no ground truth available) get no
    per-class entry; classes with only one outcome are reported but left
    out of the macro averages.
    """
    if tuple(pred.sample_ids) != tuple(truth.sample_ids):
        raise ShapeMismatch("prediction and truth sample order differ")
    if tuple(pred.labels) != tuple(truth.labels):
        raise ShapeMismatch(f"label order differs: {pred.labels} vs {truth.labels}")
    per_class: dict[str, ClassMetrics] = {}
    skipped = []
    for j, lab in enumerate(truth.labels):
        if lab in truth.excluded:
            continue
        cm = class_metrics(pred.probs[:, j], truth.values[:, j], threshold)
        per_class[lab] = cm
        if cm.degenerate:
            skipped.append(lab)
    used = [cm for lab, cm in per_class.items() if not cm.degenerate]
    return MetricsReport(
        per_class=per_class,
        macro_auc=_mean([cm.auc for cm in used]),
        macro_f1=_mean([cm.f1 for cm in used]),
        macro_precision=_mean([cm.precision for cm in used]),
        macro_recall=_mean([cm.recall for cm in used]),
        skipped_labels=tuple(skipped),
        excluded_labels=tuple(truth.excluded),
        n_samples=len(truth),
        threshold=threshold,
    )


def macro_auc(probs: np.ndarray, truth: np.ndarray) -> float:
    """Mean AUC over label columns that contain both classes (nan if none do)."""
    values = []
    for j in range(truth.shape[1]):
        col = truth[:, j]
        if 0 < col.sum() < col.size:
            values.append(auc(probs[:, j], col))
    return _mean(values)
