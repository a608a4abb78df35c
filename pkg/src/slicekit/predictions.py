"""Per-slice prediction records and the score/label CSV schema.

Score files carry ``volume_id,view,slice_index,score`` with optional ``organ``
and ``label`` columns. Organs may be written as BTCV ids or names.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .errors import IoError, MissingPredictions, ParseError, UnknownOrgan
from .slicer import VIEWS, View, slice_count
from .volume_io import BTCV_ORGANS, SegMap


@dataclass(frozen=True)
class PredictionRecord:
    volume_id: str
    view: View
    slice_index: int
    organ: int | None
    score: float
    label: int | None = None

    @property
    def key(self) -> tuple:
        return (self.volume_id, self.view, self.slice_index, self.organ)


class PredictionSet:
    """Validated collection of prediction records keyed by (volume, view, slice, organ)."""

    def __init__(self, records: Iterable[PredictionRecord] = ()):
        self.records: list[PredictionRecord] = []
        self._index: dict[tuple, PredictionRecord] = {}
        for rec in records:
            self.add(rec)

    def add(self, rec: PredictionRecord) -> None:
        if not (0.0 <= rec.score <= 1.0) or math.isnan(rec.score):
            raise ParseError(f"score {rec.score} for {rec.key} is outside [0, 1]")
        if rec.slice_index < 0:
            raise ParseError(f"negative slice index in {rec.key}")
        if rec.label not in (None, 0, 1):
            raise ParseError(f"label {rec.label} for {rec.key} is not binary")
        if rec.key in self._index:
            raise ParseError(f"duplicate prediction for {rec.key}")
        self._index[rec.key] = rec
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def get(self, volume_id: str, view: View, slice_index: int, organ: int | None):
        return self._index.get((volume_id, view, slice_index, organ))

    def volume_ids(self) -> list[str]:
        return sorted({r.volume_id for r in self.records})

    def organs(self) -> list[int]:
        return sorted({r.organ for r in self.records if r.organ is not None})

    def scores_for(self, volume_id: str, view: View, organ: int, n_slices: int) -> np.ndarray:
        """Dense score vector for one (volume, view, organ); unscored slices are NaN.

        Raises MissingPredictions when no slice of that view is scored at all.
        """
        out = np.full(n_slices, np.nan)
        found = False
        for i in range(n_slices):
            rec = self._index.get((volume_id, view, i, organ))
            if rec is not None:
                out[i] = rec.score
                found = True
        if not found:
            raise MissingPredictions(
                f"no scores for volume {volume_id!r}, view {view.value}, organ {organ}")
        return out


def _parse_organ(text: str, organ_table: Mapping[int, str]) -> int | None:
    text = text.strip()
    if not text:
        return None
    if text.lstrip("-").isdigit():
        oid = int(text)
        if oid in organ_table and oid != 0:
            return oid
    else:
        low = text.lower()
        for oid, name in organ_table.items():
            if oid != 0 and name.lower() == low:
                return oid
    raise UnknownOrgan(f"unknown organ {text!r}")


def read_predictions(path: str | os.PathLike, organ_table: Mapping[int, str] = BTCV_ORGANS,
                     score_column: str = "score") -> PredictionSet:
    """Parse a score (or label) CSV into a PredictionSet."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        fields = set(reader.fieldnames or ())
        required = {"volume_id", "view", "slice_index"}
        if not required <= fields or not ({score_column, "label"} & fields):
            raise ParseError(f"{path}: header must include volume_id,view,slice_index and score or label")
        records = []
        for lineno, row in enumerate(reader, start=2):
            try:
                label_text = (row.get("label") or "").strip()
                label = int(float(label_text)) if label_text else None
                score_text = (row.get(score_column) or "").strip()
                score = float(score_text) if score_text else float(label)
                records.append(PredictionRecord(
                    volume_id=row["volume_id"].strip(),
                    view=View.parse(row["view"]),
                    slice_index=int(row["slice_index"]),
                    organ=_parse_organ(row.get("organ") or "", organ_table),
                    score=score,
                    label=label,
                ))
            except (ValueError, TypeError) as exc:
                if isinstance(exc, UnknownOrgan):
                    raise
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    return PredictionSet(records)


def write_predictions(preds: PredictionSet | Iterable[PredictionRecord], path: str | os.PathLike,
                      organ_table: Mapping[int, str] = BTCV_ORGANS) -> None:
    records = list(preds)
    with_organ = any(r.organ is not None for r in records)
    with_label = any(r.label is not None for r in records)
    header = ["volume_id", "view", "slice_index"] + (["organ"] if with_organ else []) + ["score"]
    header += ["label"] if with_label else []
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for r in records:
                row = [r.volume_id, r.view.value, r.slice_index]
                if with_organ:
                    row.append("" if r.organ is None else organ_table[r.organ])
                row.append(repr(float(r.score)))
                if with_label:
                    row.append("" if r.label is None else r.label)
                writer.writerow(row)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def area_predictions(seg: SegMap, volume_id: str = "vol", noise: float = 0.0,
                     rng: np.random.Generator | None = None) -> PredictionSet:
    """Reference organ-slice scores from ground-truth areas.

    Score is the slice's organ area over the organ's peak area in that view, plus
    optional Gaussian noise of ``noise`` (relative to the peak), clipped to [0, 1].
    Each record also carries the presence label ``area > 0``.
    """
    from .slc import organ_areas

    rng = rng if rng is not None else np.random.default_rng(0)
    records = []
    for oid in seg.organ_ids():
        for view in VIEWS:
            areas = organ_areas(seg, view, oid).areas.astype(np.float64)
            peak = areas.max()
            if peak == 0:
                continue
            scores = areas / peak
            if noise:
                scores = scores + rng.normal(0.0, noise, size=scores.shape)
            scores = np.clip(scores, 0.0, 1.0)
            for i, s in enumerate(scores):
                records.append(PredictionRecord(volume_id, view, i, oid, float(s), int(areas[i] > 0)))
    return PredictionSet(records)


def check_coverage(preds: PredictionSet, seg: SegMap, volume_id: str) -> None:
    for view in VIEWS:
        n = slice_count(seg, view)
        if not any(r.volume_id == volume_id and r.view is view and r.slice_index < n for r in preds):
            raise MissingPredictions(f"no predictions for volume {volume_id!r} view {view.value}")
