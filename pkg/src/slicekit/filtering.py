"""Stage-1 informativeness labels, slice scorers, retention reports and weighted BCE."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from .errors import ConfigError, EmptyDataset, IoError, MissingPredictions, ShapeError
from .slicer import VIEWS, Slice2D, View, extract_view, slice_count, view_slice
from .volume_io import SegMap

DEFAULT_TAU = 0.001
PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class InformativenessLabel:
    view: View
    slice_index: int
    label: int
    foreground_ratio: float


def _check_tau(tau: float) -> None:
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"tau={tau} must lie in [0, 1]")


def label_informative(label_slice: Slice2D, tau: float = DEFAULT_TAU) -> InformativenessLabel:
    """Binary label: 1 when the foreground pixel fraction reaches ``tau`` (inclusive)."""
    _check_tau(tau)
    data = np.asarray(label_slice.data)
    ratio = int(np.count_nonzero(data > 0)) / data.size
    # compare the ratio, not fg >= tau*H*W: the product can round past an exact boundary
    return InformativenessLabel(label_slice.view, label_slice.index, int(ratio >= tau), ratio)


def filter_volume(seg: SegMap, view: View | str, tau: float = DEFAULT_TAU) -> list[InformativenessLabel]:
    _check_tau(tau)
    return [label_informative(s, tau) for s in extract_view(seg, view)]


@dataclass(frozen=True)
class RetentionRow:
    view: View
    total_slices: float
    retained_slices: float

    @property
    def retention_rate(self) -> float:
        return self.retained_slices / self.total_slices if self.total_slices else 0.0

    @property
    def reduction_pct(self) -> float:
        return 100.0 * (1.0 - self.retention_rate)


@dataclass(frozen=True)
class RetentionReport:
    rows: tuple[RetentionRow, ...]

    def __getitem__(self, view: View | str) -> RetentionRow:
        view = View.parse(view)
        for row in self.rows:
            if row.view is view:
                return row
        raise KeyError(view)


RETENTION_COLUMNS = ["view", "avg_total_slices", "avg_retained_slices", "retention_rate", "reduction_pct"]

LabelsByView = Mapping[View | str, Sequence[InformativenessLabel] | tuple[int, int]]


def _counts(entry) -> tuple[int, int]:
    if isinstance(entry, tuple) and len(entry) == 2 and all(isinstance(v, (int, np.integer)) for v in entry):
        return int(entry[0]), int(entry[1])
    labels = list(entry)
    return len(labels), sum(lab.label for lab in labels)


def retention_report(labels_by_view: LabelsByView | Sequence[LabelsByView]) -> RetentionReport:
    """Per-view retention; several volumes are combined by mean total and mean retained.

    Each view entry is either a label sequence or a ``(total, retained)`` pair.
    """
    volumes = [labels_by_view] if isinstance(labels_by_view, Mapping) else list(labels_by_view)
    if not volumes or not any(volumes):
        raise EmptyDataset("retention report needs at least one view")
    per_view: dict[View, list[tuple[int, int]]] = {}
    for vol in volumes:
        for view, entry in vol.items():
            per_view.setdefault(View.parse(view), []).append(_counts(entry))
    rows = []
    for view in VIEWS:
        if view in per_view:
            pairs = per_view[view]
            rows.append(RetentionRow(
                view,
                sum(t for t, _ in pairs) / len(pairs),
                sum(r for _, r in pairs) / len(pairs),
            ))
    return RetentionReport(tuple(rows))


def write_retention_csv(report: RetentionReport, path: str | os.PathLike) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(RETENTION_COLUMNS)
            for row in report.rows:
                writer.writerow([row.view.value, repr(row.total_slices), repr(row.retained_slices),
                                 repr(row.retention_rate), repr(row.reduction_pct)])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def weighted_bce(scores: Sequence[float], labels: Sequence[int], pos_weight: float = 1.0) -> float:
    """Mean of ``-[w*y*log p + (1-y)*log(1-p)]`` with p clamped to [1e-7, 1-1e-7]."""
    p = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape or p.ndim != 1 or p.size == 0:
        raise ShapeError(f"scores {p.shape} and labels {y.shape} must be equal-length non-empty vectors")
    if not pos_weight > 0:
        raise ConfigError(f"pos_weight={pos_weight} must be positive")
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(np.mean(-(pos_weight * y * np.log(p) + (1.0 - y) * np.log1p(-p))))


# ---------------------------------------------------------------------------
# scorers

class SliceScorer(Protocol):
    """Relevance in [0, 1] for one slice of a prepared volume."""

    def score(self, volume_id: str, view: View, slice_index: int) -> float: ...


class GroundTruthScorer:
    """Scores 1.0 for slices whose foreground ratio reaches ``tau``, else 0.0."""

    def __init__(self, segs: Mapping[str, SegMap], tau: float = DEFAULT_TAU):
        _check_tau(tau)
        self.segs = dict(segs)
        self.tau = tau

    def score(self, volume_id: str, view: View, slice_index: int) -> float:
        seg = self.segs[volume_id]
        view = View.parse(view)
        if not 0 <= slice_index < slice_count(seg, view):
            raise IndexError(f"slice {slice_index} outside view {view.value}")
        sl = Slice2D(view_slice(seg.labels, view, slice_index), view, slice_index, "label")
        return float(label_informative(sl, self.tau).label)


class FileScorer:
    """Scores looked up from a ``volume_id,view,slice_index,score`` CSV.

    Organ-agnostic rows are used as-is. A file holding only per-organ rows scores
    each slice by its highest organ score.
    """

    def __init__(self, path: str | os.PathLike):
        from .predictions import read_predictions

        self.predictions = read_predictions(path)
        records = self.predictions.records
        if not any(r.organ is None for r in records):
            table: dict = {}
            for r in records:
                key = (r.volume_id, r.view, r.slice_index)
                table[key] = max(table.get(key, 0.0), r.score)
            self._table = table
        else:
            self._table = {(r.volume_id, r.view, r.slice_index): r.score
                           for r in records if r.organ is None}

    def score(self, volume_id: str, view: View, slice_index: int) -> float:
        key = (volume_id, View.parse(view), int(slice_index))
        try:
            return self._table[key]
        except KeyError:
            raise MissingPredictions(f"no score for {key}") from None


def retained_indices(scorer: SliceScorer, volume_id: str, view: View, n_slices: int,
                     threshold: float = 0.5) -> list[int]:
    return [i for i in range(n_slices) if scorer.score(volume_id, view, i) >= threshold]


def scorer_retention(scorer: SliceScorer, volumes: Mapping[str, Iterable[int] | SegMap],
                     threshold: float = 0.5) -> RetentionReport:
    """Retention report for any scorer; ``volumes`` maps volume id to a SegMap (for dims)."""
    per_volume = []
    for vid, seg in volumes.items():
        entry = {}
        for view in VIEWS:
            n = slice_count(seg, view)
            entry[view] = (n, len(retained_indices(scorer, vid, view, n, threshold)))
        per_volume.append(entry)
    return retention_report(per_volume)


def pos_weight_from_labels(labels: Sequence[int]) -> float:
    """Negative/positive ratio, the usual class weight for weighted BCE."""
    y = np.asarray(labels)
    pos = int(np.count_nonzero(y == 1))
    neg = y.size - pos
    return neg / pos if pos and neg else 1.0
