"""Slice Localization Concordance (SLC).

For an organ's per-slice area profile ``A_s`` in one view, the anchor ``s*`` is
the slice of maximal area ``A*``. Each selected slice contributes a coverage
``C_s = A_s / (A* + eps)`` weighted by ``w_s = exp(-(|s - s*| / N) / delta)``,
where ``N`` is the view's slice count, and SLC is the weighted mean of ``C_s``.
Dividing the distance by ``N`` makes ``delta`` a fraction of the view extent.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, EmptyDataset, MissingPredictions, UnknownOrgan
from .predictions import PredictionSet
from .slicer import VIEWS, View
from .volume_io import SegMap

DEFAULT_EPSILON = 1e-6
DEFAULT_DELTAS = (0.01, 0.05, 0.10, 0.20)
DEFAULT_TOP_PERCENTS = (1.0, 3.0, 5.0, 10.0)

OVERALL = "overall"


@dataclass(frozen=True)
class OrganAreaProfile:
    organ: int
    view: View
    areas: np.ndarray  # int64, one entry per slice of the view


@dataclass(frozen=True)
class SlcConfig:
    delta: float
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not self.delta > 0:
            raise ConfigError(f"delta={self.delta} must be positive")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon={self.epsilon} must be positive")


@dataclass(frozen=True)
class SlcResult:
    organ: int
    view: View
    slc: float | None  # None marks an organ absent from the ground truth
    anchor_area: int | None
    anchor_index: int | None
    selected: tuple[int, ...]

    @property
    def absent(self) -> bool:
        return self.slc is None


_SUM_AXES = {View.AXIAL: (0, 1), View.CORONAL: (0, 2), View.SAGITTAL: (1, 2)}


def organ_areas(seg: SegMap, view: View | str, organ: int | str) -> OrganAreaProfile:
    """Pixel count of ``organ`` in every slice of ``view``.

    Rotations applied during slice extraction do not change counts, so the
    profile is a plain axis reduction.
    """
    view = View.parse(view)
    try:
        oid = seg.resolve_organ(organ)
    except UnknownOrgan:
        raise UnknownOrgan(f"organ {organ!r} is not in the organ table") from None
    areas = np.count_nonzero(seg.labels == oid, axis=_SUM_AXES[view]).astype(np.int64)
    return OrganAreaProfile(oid, view, areas)


def center_slice(profile: OrganAreaProfile) -> tuple[int, int] | None:
    """``(A*, s*)`` with ties going to the smallest index; None for an all-zero profile."""
    areas = np.asarray(profile.areas)
    if areas.size == 0 or areas.max() <= 0:
        return None
    s_star = int(np.argmax(areas))
    return int(areas[s_star]), s_star


def slc_score(profile: OrganAreaProfile, selected: Iterable[int], config: SlcConfig) -> SlcResult:
    areas = np.asarray(profile.areas, dtype=np.float64)
    n = areas.size
    sel = tuple(sorted({int(s) for s in selected}))
    if sel and (sel[0] < 0 or sel[-1] >= n):
        raise IndexError(f"selected slices {sel} fall outside [0, {n})")
    anchor = center_slice(profile)
    if anchor is None:
        return SlcResult(profile.organ, profile.view, None, None, None, sel)
    a_star, s_star = anchor
    if not sel:
        return SlcResult(profile.organ, profile.view, 0.0, a_star, s_star, sel)
    idx = np.asarray(sel)
    coverage = areas[idx] / (a_star + config.epsilon)
    weights = np.exp(-(np.abs(idx - s_star) / n) / config.delta)
    value = float(np.sum(coverage * weights) / np.sum(weights))
    return SlcResult(profile.organ, profile.view, value, a_star, s_star, sel)


def _top_count(k_percent: float, n: int) -> int:
    # exact rational arithmetic: 5/100*100 must give 5, not 5.000000000000001
    return math.ceil(Fraction(k_percent).limit_denominator(10**9) * n / 100)


def top_percent_select(scores: Sequence[float], k_percent: float) -> set[int]:
    """Indices of the ``ceil(k/100 * N)`` highest scores; ties go to smaller indices.

    NaN scores mark unscored slices, which are never selected.
    """
    if not 0 < k_percent <= 100:
        raise ConfigError(f"top percent {k_percent} must lie in (0, 100]")
    scores = np.asarray(scores, dtype=np.float64)
    count = _top_count(k_percent, scores.size)
    eligible = np.flatnonzero(~np.isnan(scores))
    order = eligible[np.argsort(-scores[eligible], kind="stable")]
    return {int(i) for i in order[:count]}


def threshold_select(scores: Sequence[float], threshold: float = 0.5) -> set[int]:
    scores = np.asarray(scores, dtype=np.float64)
    return {int(i) for i in np.flatnonzero(scores >= threshold)}


# ---------------------------------------------------------------------------
# sweeps

@dataclass(frozen=True)
class SweepCell:
    delta: float
    selection: float | str  # top percent, or "score>=t" for threshold selection
    volume_id: str
    organ: int
    view: View
    slc: float


@dataclass
class SweepTable:
    model: str
    deltas: tuple[float, ...]
    selections: tuple[float | str, ...]
    organ_names: dict[int, str]
    cells: list[SweepCell]

    def _values(self, delta, selection, organ=None, view=None) -> list[float]:
        return [c.slc for c in self.cells
                if c.delta == delta and c.selection == selection
                and (organ is None or c.organ == organ) and (view is None or c.view is view)]

    def overall(self, delta: float, selection: float | str) -> float:
        """Unweighted mean over every present (volume, organ, view) cell."""
        vals = self._values(delta, selection)
        return float(np.mean(vals)) if vals else float("nan")

    def per_organ(self, delta, selection) -> dict[int, float]:
        return {o: float(np.mean(self._values(delta, selection, organ=o))) for o in self.organs()}

    def per_view(self, delta, selection) -> dict[View, float]:
        out = {}
        for v in VIEWS:
            vals = self._values(delta, selection, view=v)
            if vals:
                out[v] = float(np.mean(vals))
        return out

    def organs(self) -> list[int]:
        return sorted({c.organ for c in self.cells})

    def rows(self) -> list[dict]:
        """Long-format rows: each organ and ``overall``, for each view present."""
        out = []
        views = [v for v in VIEWS if any(c.view is v for c in self.cells)]
        for delta in self.deltas:
            for sel in self.selections:
                groups = [(self.organ_names.get(o, str(o)), o) for o in self.organs()] + [(OVERALL, None)]
                for name, organ in groups:
                    for view in views:
                        vals = self._values(delta, sel, organ=organ, view=view)
                        out.append({
                            "model": self.model,
                            "delta": delta,
                            "top_percent": sel,
                            "organ": name,
                            "view": view.value,
                            "slc": float(np.mean(vals)) if vals else float("nan"),
                        })
        return out


SWEEP_COLUMNS = ["model", "delta", "top_percent", "organ", "view", "slc"]


def _volume_cells(volume_id: str, seg: SegMap, preds: PredictionSet, deltas, selections,
                  threshold: float | None, epsilon: float) -> list[SweepCell]:
    cells = []
    for oid in seg.organ_ids():
        for view in VIEWS:
            profile = organ_areas(seg, view, oid)
            if center_slice(profile) is None:
                continue  # absent organs are excluded from evaluation
            scores = preds.scores_for(volume_id, view, oid, profile.areas.size)
            for sel in selections:
                if isinstance(sel, str):
                    chosen = threshold_select(np.nan_to_num(scores, nan=-1.0), threshold)
                else:
                    chosen = top_percent_select(scores, sel)
                for delta in deltas:
                    res = slc_score(profile, chosen, SlcConfig(delta, epsilon))
                    cells.append(SweepCell(delta, sel, volume_id, oid, view, res.slc))
    return cells


def slc_sweep(segs: SegMap | Mapping[str, SegMap], predictions: PredictionSet,
              deltas: Sequence[float] = DEFAULT_DELTAS,
              top_percents: Sequence[float] = DEFAULT_TOP_PERCENTS,
              threshold: float | None = None, epsilon: float = DEFAULT_EPSILON,
              model: str = "model", jobs: int = 1) -> SweepTable:
    """SLC for every (delta, selection rule, organ, view) over one or more volumes.

    Selections are the Top-% rules plus, when ``threshold`` is given, a
    ``score >= threshold`` rule. Organs absent from a volume's ground truth are
    skipped for that volume.
    """
    if isinstance(segs, SegMap):
        vids = predictions.volume_ids()
        vid = vids[0] if len(vids) == 1 else "vol"
        segs = {vid: segs}
    if not segs:
        raise EmptyDataset("slc_sweep needs at least one segmentation")
    deltas = tuple(float(d) for d in deltas)
    for d in deltas:
        SlcConfig(d, epsilon)
    selections: list[float | str] = [float(k) for k in top_percents]
    for k in selections:
        if not 0 < k <= 100:
            raise ConfigError(f"top percent {k} must lie in (0, 100]")
    if threshold is not None:
        selections.append(f"score>={threshold:g}")
    if not deltas or not selections:
        raise ConfigError("need at least one delta and one selection rule")

    def run(item):
        vid, seg = item
        if vid not in set(predictions.volume_ids()):
            raise MissingPredictions(f"no predictions for volume {vid!r}")
        return _volume_cells(vid, seg, predictions, deltas, selections, threshold, epsilon)

    items = list(segs.items())
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            per_volume = list(pool.map(run, items))
    else:
        per_volume = [run(it) for it in items]

    names: dict[int, str] = {}
    for _, seg in items:
        for oid in seg.organ_ids():
            names.setdefault(oid, seg.organ_table[oid])
    cells = [c for chunk in per_volume for c in chunk]
    return SweepTable(model, deltas, tuple(selections), names, cells)
