"""Threshold and ranking metrics over per-slice organ predictions."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import EmptyDataset, MissingPredictions, ShapeError, UndefinedMetric
from .predictions import PredictionSet
from .volume_io import BTCV_ORGANS


def _pair(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape or s.size == 0:
        raise ShapeError(f"scores ({s.size}) and labels ({y.size}) must be equal-length and non-empty")
    if not np.all((y == 0) | (y == 1)):
        raise ShapeError("labels must be binary")
    return s, y.astype(bool)


def confusion_metrics(scores, labels, threshold: float = 0.5) -> tuple[float, float, float]:
    """(precision, recall, f1) with prediction ``score >= threshold``; empty ratios give 0."""
    s, y = _pair(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: concordant pairs plus half the tied pairs, over P*N."""
    s, y = _pair(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("ROC-AUC needs both positive and negative labels")
    ranks = rankdata(s, method="average")
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def pr_auc(scores, labels) -> float:
    """Average precision over descending distinct score thresholds (ties enter together)."""
    s, y = _pair(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetric("PR-AUC needs at least one positive label")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last position of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    predicted = ends + 1
    recall = tp / n_pos
    precision = tp / predicted
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


@dataclass(frozen=True)
class MetricRow:
    organ: str
    precision: float
    recall: float
    f1: float
    roc_auc: float | None
    pr_auc: float | None
    support: int
    count: int
    threshold: float


@dataclass(frozen=True)
class MetricsReport:
    rows: tuple[MetricRow, ...]  # per organ, then "overall"

    def __getitem__(self, organ: str) -> MetricRow:
        for row in self.rows:
            if row.organ == organ:
                return row
        raise KeyError(organ)

    def to_dict(self) -> dict:
        return {row.organ: {k: v for k, v in asdict(row).items() if k != "organ"} for row in self.rows}


METRIC_COLUMNS = ["organ", "precision", "recall", "f1", "roc_auc", "pr_auc", "support", "count", "threshold"]


def _row(name: str, s: np.ndarray, y: np.ndarray, threshold) -> MetricRow:
    if np.ndim(threshold) == 0:
        p, r, f = confusion_metrics(s, y, float(threshold))
        thr = float(threshold)
    else:
        p, r, f = confusion_metrics((s >= threshold).astype(float), y, 0.5)
        thr = float("nan")
    try:
        roc = roc_auc(s, y)
    except UndefinedMetric:
        roc = None
    try:
        pr = pr_auc(s, y)
    except UndefinedMetric:
        pr = None
    return MetricRow(name, p, r, f, roc, pr, int(y.sum()), int(y.size), thr)


def evaluate(predictions: PredictionSet, labels: PredictionSet | None = None,
             threshold: float = 0.5, organ_thresholds: Mapping[str, float] | None = None,
             organ_table: Mapping[int, str] = BTCV_ORGANS) -> MetricsReport:
    """Per-organ and pooled metrics.

    Labels come from ``labels`` (joined on volume, view, slice, organ) or, when
    omitted, from the prediction records themselves. ``organ_thresholds``
    overrides the decision threshold per organ name; the pooled row applies each
    record's own organ threshold.
    """
    organ_thresholds = {k.lower(): v for k, v in (organ_thresholds or {}).items()}
    by_organ: dict[int | None, tuple[list[float], list[int]]] = {}
    for rec in predictions:
        if labels is not None:
            lab = labels.get(rec.volume_id, rec.view, rec.slice_index, rec.organ)
            if lab is None:
                raise MissingPredictions(f"no label for {rec.key}")
            y = lab.label if lab.label is not None else int(lab.score >= 0.5)
        else:
            if rec.label is None:
                raise MissingPredictions(f"prediction {rec.key} carries no label")
            y = rec.label
        bucket = by_organ.setdefault(rec.organ, ([], []))
        bucket[0].append(rec.score)
        bucket[1].append(y)
    if not by_organ:
        raise EmptyDataset("no predictions to evaluate")

    rows, all_s, all_y, all_t = [], [], [], []
    for organ in sorted(by_organ, key=lambda o: -1 if o is None else o):
        name = "all organs" if organ is None else organ_table.get(organ, str(organ))
        thr = organ_thresholds.get(name.lower(), threshold)
        s, y = np.asarray(by_organ[organ][0]), np.asarray(by_organ[organ][1])
        rows.append(_row(name, s, y, thr))
        all_s.append(s)
        all_y.append(y)
        all_t.append(np.full(s.size, thr))
    s, y, t = np.concatenate(all_s), np.concatenate(all_y), np.concatenate(all_t)
    uniform = np.all(t == t[0])
    rows.append(_row("overall", s, y, t[0] if uniform else t))
    return MetricsReport(tuple(rows))


def threshold_sweep(scores: Sequence[float], labels: Sequence[int], thresholds: Sequence[float]):
    """(threshold, precision, recall, f1) for each threshold in order."""
    return [(float(t), *confusion_metrics(scores, labels, t)) for t in thresholds]
