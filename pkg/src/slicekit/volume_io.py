"""CT volume containers, NIfTI-1 I/O, intensity preprocessing and organ statistics.

Arrays are indexed ``data[x, y, z]`` with shape ``(H, W, D)``; NIfTI ``dim[1..3]``
map onto these axes directly (first index fastest on disk).
"""

from __future__ import annotations

import csv
import gzip
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DegenerateIntensity,
    EmptyDataset,
    InvalidWindow,
    IoError,
    ParseError,
    UnknownOrgan,
    UnsupportedDatatype,
    UnsupportedRank,
)

# BTCV label convention.
BTCV_ORGANS: dict[int, str] = {
    0: "background",
    1: "spleen",
    2: "right kidney",
    3: "left kidney",
    4: "gallbladder",
    5: "esophagus",
    6: "liver",
    7: "stomach",
    8: "aorta",
    9: "inferior vena cava",
    10: "portal and splenic vein",
    11: "pancreas",
    12: "right adrenal gland",
    13: "left adrenal gland",
}

WHOLE_FOREGROUND = "whole foreground"


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.flags.writeable:
        a = a.copy()
        a.flags.writeable = False
    return a


@dataclass(frozen=True)
class CtVolume:
    """Scalar CT grid, HU before normalization and [0, 1] after."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = None
    normalized: bool = False

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise UnsupportedRank(f"expected a non-empty 3D grid, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(not s > 0 for s in spacing):
            raise ConfigError(f"spacing must be three positive values, got {self.spacing}")
        affine = np.diag([*spacing, 1.0]) if self.affine is None else np.asarray(self.affine, float)
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", _freeze(affine))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)


@dataclass(frozen=True)
class SegMap:
    """Integer organ-label grid; 0 is background."""

    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = None
    organ_table: Mapping[int, str] = field(default_factory=lambda: dict(BTCV_ORGANS))

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise UnsupportedRank(f"expected a non-empty 3D grid, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise UnsupportedDatatype(f"label grid must be integer typed, got {labels.dtype}")
        unknown = [int(v) for v in np.unique(labels) if v != 0 and int(v) not in self.organ_table]
        if unknown:
            raise UnknownOrgan(f"labels {unknown} are not in the organ table")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(not s > 0 for s in spacing):
            raise ConfigError(f"spacing must be three positive values, got {self.spacing}")
        affine = np.diag([*spacing, 1.0]) if self.affine is None else np.asarray(self.affine, float)
        object.__setattr__(self, "labels", _freeze(labels))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", _freeze(affine))
        object.__setattr__(self, "organ_table", dict(self.organ_table))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.labels.shape)

    @property
    def data(self) -> np.ndarray:
        return self.labels

    def organ_ids(self) -> list[int]:
        return sorted(k for k in self.organ_table if k != 0)

    def resolve_organ(self, organ: int | str) -> int:
        """Map an organ id or (case-insensitive) name to its id."""
        if isinstance(organ, (int, np.integer)):
            if int(organ) in self.organ_table and int(organ) != 0:
                return int(organ)
        else:
            text = str(organ).strip().lower()
            if text.isdigit():
                return self.resolve_organ(int(text))
            for oid, name in self.organ_table.items():
                if oid != 0 and name.lower() == text:
                    return oid
        raise UnknownOrgan(f"unknown organ {organ!r}")


# ---------------------------------------------------------------------------
# NIfTI-1

_HDR_FMT = "i10s18sihbb8h3fhhhh8ffffhbbffffii80s24shh3f3f4f4f4f16s4s"
_HDR_SIZE = 348
_HDR_FIELDS = (
    "sizeof_hdr data_type db_name extents session_error regular dim_info "
    "dim intent_p1 intent_p2 intent_p3 intent_code datatype bitpix slice_start "
    "pixdim vox_offset scl_slope scl_inter slice_end slice_code xyzt_units "
    "cal_max cal_min slice_duration toffset glmax glmin descrip aux_file "
    "qform_code sform_code quatern offset srow_x srow_y srow_z intent_name magic"
).split()
# number of struct items each named field consumes
_FIELD_WIDTH = {"dim": 8, "pixdim": 8, "quatern": 3, "offset": 3, "srow_x": 4, "srow_y": 4, "srow_z": 4}

NIFTI_DTYPES: dict[int, np.dtype] = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
_DTYPE_CODES = {v: k for k, v in NIFTI_DTYPES.items()}

_NORMALIZED_TAG = b"slicekit:normalized"


def _parse_header(raw: bytes) -> tuple[dict, str]:
    if len(raw) < _HDR_SIZE:
        raise ParseError(f"header truncated: {len(raw)} bytes")
    if struct.unpack("<i", raw[:4])[0] == _HDR_SIZE:
        endian = "<"
    elif struct.unpack(">i", raw[:4])[0] == _HDR_SIZE:
        endian = ">"
    else:
        raise ParseError("sizeof_hdr is not 348; not a NIfTI-1 file")
    items = struct.unpack(endian + _HDR_FMT, raw[:_HDR_SIZE])
    hdr, pos = {}, 0
    for name in _HDR_FIELDS:
        width = _FIELD_WIDTH.get(name, 1)
        hdr[name] = items[pos] if width == 1 else items[pos:pos + width]
        pos += width
    return hdr, endian


def _read_bytes(path: Path) -> bytes:
    try:
        raw = path.read_bytes()
    except IsADirectoryError as exc:
        raise IoError(f"{path} is a directory") from exc
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise ParseError(f"corrupt gzip stream in {path}") from exc
    return raw


def _quatern_to_affine(hdr: dict) -> np.ndarray:
    b, c, d = (float(v) for v in hdr["quatern"])
    a = math.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])
    pixdim = hdr["pixdim"]
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    scale = np.array([pixdim[1], pixdim[2], qfac * pixdim[3]], dtype=float)
    affine = np.eye(4)
    affine[:3, :3] = rot * scale
    affine[:3, 3] = hdr["offset"]
    return affine


def read_nifti(path: str | os.PathLike, label: bool = False) -> CtVolume | SegMap:
    """Load a NIfTI-1 file (``.nii``, ``.nii.gz`` or an ``.hdr``/``.img`` pair).

    ``label=True`` loads the grid as a :class:`SegMap`; the stored values must be
    integral. Otherwise a :class:`CtVolume` is returned.
    """
    path = Path(path)
    raw = _read_bytes(path)
    hdr, endian = _parse_header(raw)
    magic = hdr["magic"]
    if magic == b"n+1\x00":
        payload, start = raw, int(hdr["vox_offset"])
    elif magic == b"ni1\x00":
        img = path.with_suffix(".img") if path.suffix != ".gz" else Path(str(path)[:-7] + ".img")
        payload, start = _read_bytes(img), 0
    else:
        raise ParseError(f"bad NIfTI magic {magic!r}")

    if hdr["datatype"] not in NIFTI_DTYPES:
        raise UnsupportedDatatype(f"NIfTI datatype code {hdr['datatype']} is not supported")
    dim = hdr["dim"]
    if dim[0] != 3:
        raise UnsupportedRank(f"expected a 3D image, header has dim[0]={dim[0]}")
    dims = tuple(int(n) for n in dim[1:4])
    if min(dims) < 1:
        raise ParseError(f"non-positive dimensions {dims}")

    dtype = NIFTI_DTYPES[hdr["datatype"]].newbyteorder(endian)
    nbytes = int(np.prod(dims)) * dtype.itemsize
    if start < 0 or len(payload) < start + nbytes:
        raise ParseError(f"payload truncated: need {nbytes} bytes at offset {start}, file has {len(payload)}")
    data = np.frombuffer(payload, dtype=dtype, count=int(np.prod(dims)), offset=start)
    data = data.reshape(dims, order="F").astype(dtype.newbyteorder("="), copy=True)

    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if math.isfinite(slope) and slope != 0 and not (slope == 1.0 and inter == 0.0):
        data = data.astype(np.float64) * slope + inter

    spacing = tuple(abs(float(p)) or 1.0 for p in hdr["pixdim"][1:4])
    if hdr["sform_code"] > 0:
        affine = np.eye(4)
        affine[0], affine[1], affine[2] = hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]
    elif hdr["qform_code"] > 0:
        affine = _quatern_to_affine(hdr)
    else:
        affine = np.diag([*spacing, 1.0])

    if label:
        if not np.issubdtype(data.dtype, np.integer):
            if not np.all(np.isfinite(data)) or np.any(data != np.round(data)):
                raise ParseError("label file holds non-integral values")
            data = data.astype(np.int32)
        return SegMap(data, spacing=spacing, affine=affine)
    normalized = hdr["descrip"].rstrip(b"\x00") == _NORMALIZED_TAG
    return CtVolume(data, spacing=spacing, affine=affine, normalized=normalized)


def write_nifti(image: CtVolume | SegMap, path: str | os.PathLike) -> None:
    """Write a single-file NIfTI-1 image; gzip-compressed when the name ends in ``.gz``.

    SegMaps are stored as int16 and normalized volumes as float64. Other volumes
    keep their dtype when NIfTI supports it and fall back to float64.
    """
    path = Path(path)
    if isinstance(image, SegMap):
        data = image.labels.astype(np.int16)
        descrip = b""
    else:
        if image.normalized:
            data = image.data.astype(np.float64)
        elif np.dtype(image.data.dtype.name) in _DTYPE_CODES:
            data = image.data
        else:
            data = image.data.astype(np.float64)
        descrip = _NORMALIZED_TAG if image.normalized else b""
    dtype = np.dtype(data.dtype.name)
    code = _DTYPE_CODES[dtype]

    dims = image.dims
    sx, sy, sz = image.spacing
    affine = np.asarray(image.affine, float)
    vox_offset = 352
    hdr = struct.pack(
        "<" + _HDR_FMT,
        _HDR_SIZE, b"", b"", 0, 0, b"r"[0], 0,
        3, *dims, 1, 1, 1, 1,
        0.0, 0.0, 0.0, 0, code, dtype.itemsize * 8, 0,
        1.0, sx, sy, sz, 1.0, 1.0, 1.0, 1.0,
        float(vox_offset), 0.0, 0.0, 0, 0, 10,  # xyzt_units: mm
        0.0, 0.0, 0.0, 0.0, 0, 0,
        descrip, b"",
        0, 2,
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        *affine[0], *affine[1], *affine[2],
        b"", b"n+1\x00",
    )
    payload = hdr + b"\x00" * (vox_offset - _HDR_SIZE) + data.astype(dtype.newbyteorder("<")).tobytes(order="F")
    if path.name.endswith(".gz"):
        payload = gzip.compress(payload, mtime=0)
    try:
        path.write_bytes(payload)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# intensity preprocessing

def window_hu(volume: CtVolume, lo: float = -50.0, hi: float = 200.0) -> CtVolume:
    """Clamp HU values to ``[lo, hi]`` (soft-tissue window by default)."""
    if not lo < hi:
        raise InvalidWindow(f"window lower bound {lo} must be below upper bound {hi}")
    if volume.normalized:
        raise InvalidWindow("volume is already normalized; window HU values before normalizing")
    return replace(volume, data=np.clip(volume.data, lo, hi))


def percentile_normalize(volume: CtVolume) -> CtVolume:
    """Map the 1st..99th percentile range onto [0, 1], clamping the tails.

    Percentiles use linear interpolation between sorted order statistics.
    """
    values = np.asarray(volume.data, dtype=np.float64)
    if values.size < 2:
        raise DegenerateIntensity("percentile normalization needs at least two voxels")
    p1, p99 = np.percentile(values, [1.0, 99.0], method="linear")
    span = p99 - p1
    if span < 1e-12:
        raise DegenerateIntensity(f"intensity range P99-P1={span:g} is degenerate")
    out = np.clip((values - p1) / span, 0.0, 1.0)
    return replace(volume, data=out, normalized=True)


# ---------------------------------------------------------------------------
# organ statistics

@dataclass(frozen=True)
class OrganStatRow:
    organ: str
    vf_min: float | None
    vf_median: float | None
    vf_mean: float | None
    vf_max: float | None
    size_min: float | None
    size_median: float | None
    size_mean: float | None
    size_max: float | None
    count: int


OrganStats = dict  # organ name -> OrganStatRow, whole foreground first

STATS_COLUMNS = ["organ", "vf_min", "vf_med", "vf_mean", "vf_max",
                 "size_min", "size_med", "size_mean", "size_max", "count"]


def _per_volume(seg: SegMap) -> dict[int, tuple[float, float]]:
    counts = np.bincount(seg.labels.ravel().astype(np.int64))
    total = seg.labels.size
    voxel_cm3 = seg.spacing[0] * seg.spacing[1] * seg.spacing[2] / 1000.0
    out = {}
    for oid in seg.organ_ids():
        n = int(counts[oid]) if oid < counts.size else 0
        if n:
            out[oid] = (100.0 * n / total, n * voxel_cm3)
    fg = total - int(counts[0])
    if fg:
        out[0] = (100.0 * fg / total, fg * voxel_cm3)
    return out


def _row(name: str, samples: list[tuple[float, float]]) -> OrganStatRow:
    if not samples:
        return OrganStatRow(name, None, None, None, None, None, None, None, None, 0)
    vf = np.array([s[0] for s in samples])
    size = np.array([s[1] for s in samples])
    return OrganStatRow(
        name,
        float(vf.min()), float(np.median(vf)), float(vf.mean()), float(vf.max()),
        float(size.min()), float(np.median(size)), float(size.mean()), float(size.max()),
        len(samples),
    )


def organ_stats(segmaps: Sequence[SegMap], jobs: int = 1) -> OrganStats:
    """Volume-fraction (%) and size (cm^3) statistics per organ across volumes.

    Volumes lacking an organ do not contribute to its min/median/mean/max; the
    ``count`` field reports how many volumes contain it. The first row covers the
    whole foreground (any nonzero label).
    """
    segmaps = list(segmaps)
    if not segmaps:
        raise EmptyDataset("organ_stats needs at least one segmentation")
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            per_volume = list(pool.map(_per_volume, segmaps))
    else:
        per_volume = [_per_volume(s) for s in segmaps]

    table: dict[int, str] = {}
    for seg in segmaps:
        for oid in seg.organ_ids():
            table.setdefault(oid, seg.organ_table[oid])
    stats: OrganStats = {WHOLE_FOREGROUND: _row(WHOLE_FOREGROUND, [v[0] for v in per_volume if 0 in v])}
    for oid in sorted(table):
        stats[table[oid]] = _row(table[oid], [v[oid] for v in per_volume if oid in v])
    return stats


def write_stats_csv(stats: OrganStats, path: str | os.PathLike) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(STATS_COLUMNS)
            for row in stats.values():
                writer.writerow([
                    row.organ,
                    *("" if v is None else repr(v) for v in (
                        row.vf_min, row.vf_median, row.vf_mean, row.vf_max,
                        row.size_min, row.size_median, row.size_mean, row.size_max)),
                    row.count,
                ])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_segmaps(paths: Iterable[str | os.PathLike]) -> list[SegMap]:
    return [read_nifti(p, label=True) for p in paths]
