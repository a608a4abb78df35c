"""Tri-plane slice extraction, 256x256 standardization, 2.5D triplets and view fusion."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, InvalidSlice, IoError, ShapeError
from .volume_io import CtVolume, SegMap

TARGET_SIZE = 256


class View(str, Enum):
    AXIAL = "axial"
    CORONAL = "coronal"
    SAGITTAL = "sagittal"

    @property
    def axis(self) -> int:
        """Array axis the view steps along (axial=z, coronal=y, sagittal=x)."""
        return {"axial": 2, "coronal": 1, "sagittal": 0}[self.value]

    @classmethod
    def parse(cls, value: "View | str") -> "View":
        try:
            return cls(str(value.value if isinstance(value, View) else value).strip().lower())
        except ValueError:
            raise ConfigError(f"unknown view {value!r}; expected axial, coronal or sagittal") from None


VIEWS: tuple[View, ...] = (View.AXIAL, View.CORONAL, View.SAGITTAL)


@dataclass(frozen=True)
class Slice2D:
    data: np.ndarray
    view: View
    index: int
    kind: str = "intensity"  # or "label"

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class TriSlice:
    channels: np.ndarray  # (3, rows, cols)
    center_index: int


@dataclass(frozen=True)
class MultiViewTensor:
    """Nine channels ordered axial triplet, coronal triplet, sagittal triplet."""

    channels: np.ndarray  # (9, rows, cols)

    CHANNEL_ORDER = ("axial-", "axial", "axial+", "coronal-", "coronal", "coronal+",
                     "sagittal-", "sagittal", "sagittal+")


def rot90_ccw(grid: np.ndarray) -> np.ndarray:
    """Counter-clockwise quarter turn: ``out[r, c] = grid[c, rows_out - 1 - r]``."""
    return np.rot90(grid, k=1)


def view_slice(data: np.ndarray, view: View, index: int) -> np.ndarray:
    view = View.parse(view)
    if view is View.AXIAL:
        return data[:, :, index]
    if view is View.CORONAL:
        return rot90_ccw(data[:, index, :])
    return rot90_ccw(data[index, :, :].T)


def extract_view(volume: CtVolume | SegMap, view: View | str) -> list[Slice2D]:
    """All slices of ``volume`` along ``view`` in index order.

    axial z -> ``V[:, :, z]``; coronal y -> rot90(``V[:, y, :]``);
    sagittal x -> rot90(``V[x, :, :].T``).
    """
    view = View.parse(view)
    kind = "label" if isinstance(volume, SegMap) else "intensity"
    data = volume.data
    return [Slice2D(view_slice(data, view, i), view, i, kind) for i in range(data.shape[view.axis])]


def slice_count(volume: CtVolume | SegMap, view: View | str) -> int:
    return volume.dims[View.parse(view).axis]


def standardize(sl: Slice2D, target: int = TARGET_SIZE) -> Slice2D:
    """Resize to fit a ``target`` square preserving aspect ratio, then center-pad with zeros.

    Intensity slices are resampled bilinearly, label slices by nearest neighbour.
    """
    rows, cols = sl.data.shape if sl.data.ndim == 2 else (0, 0)
    if rows == 0 or cols == 0:
        raise InvalidSlice(f"cannot standardize slice of shape {sl.data.shape}")
    scale = target / max(rows, cols)
    out_rows = min(target, max(1, int(round(rows * scale))))
    out_cols = min(target, max(1, int(round(cols * scale))))
    src = np.asarray(sl.data, dtype=np.float64) if sl.kind != "label" else np.asarray(sl.data)

    if (out_rows, out_cols) == (rows, cols):
        scaled = src
    else:
        # pixel-centre mapping of output grid onto input grid
        r = (np.arange(out_rows) + 0.5) * (rows / out_rows) - 0.5
        c = (np.arange(out_cols) + 0.5) * (cols / out_cols) - 0.5
        rr, cc = np.meshgrid(r, c, indexing="ij")
        order = 0 if sl.kind == "label" else 1
        scaled = ndimage.map_coordinates(src, [rr, cc], order=order, mode="nearest")

    canvas = np.zeros((target, target), dtype=scaled.dtype)
    r0 = (target - out_rows) // 2
    c0 = (target - out_cols) // 2
    canvas[r0:r0 + out_rows, c0:c0 + out_cols] = scaled
    return Slice2D(canvas, sl.view, sl.index, sl.kind)


def make_triplet(slices: Sequence[Slice2D], i: int) -> TriSlice:
    """Stack ``(i-1, i, i+1)``; boundary slices are replicated three times."""
    n = len(slices)
    if not 0 <= i < n:
        raise IndexError(f"slice index {i} outside [0, {n})")
    picks = (i - 1, i, i + 1) if 1 <= i <= n - 2 else (i, i, i)
    shapes = {slices[k].data.shape for k in picks}
    if len(shapes) != 1:
        raise ShapeError(f"neighbouring slices differ in shape: {shapes}")
    return TriSlice(np.stack([slices[k].data for k in picks]), i)


def fuse_views(a: TriSlice, c: TriSlice, s: TriSlice) -> MultiViewTensor:
    shapes = [t.channels.shape for t in (a, c, s)]
    if any(len(sh) != 3 or sh[0] != 3 for sh in shapes) or len(set(shapes)) != 1:
        raise ShapeError(f"triplets must share one (3, rows, cols) shape, got {shapes}")
    return MultiViewTensor(np.concatenate([a.channels, c.channels, s.channels], axis=0))


@dataclass(frozen=True)
class AugmentConfig:
    p_hflip: float = 0.0
    p_vflip: float = 0.0
    max_angle_deg: float = 0.0

    def __post_init__(self):
        for name in ("p_hflip", "p_vflip"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name}={p} must lie in [0, 1]")
        if not self.max_angle_deg >= 0.0:
            raise ConfigError(f"max_angle_deg={self.max_angle_deg} must be non-negative")


def augment(tensor: MultiViewTensor, seed: int, config: AugmentConfig | dict) -> MultiViewTensor:
    """Seeded flip/rotation applied identically to all nine channels."""
    if isinstance(config, dict):
        try:
            config = AugmentConfig(**config)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
    rng = np.random.default_rng(seed)
    # draw every variate unconditionally so the stream is config-independent
    hflip = rng.random() < config.p_hflip
    vflip = rng.random() < config.p_vflip
    angle = rng.uniform(-1.0, 1.0) * config.max_angle_deg

    out = tensor.channels
    if hflip:
        out = out[:, :, ::-1]
    if vflip:
        out = out[:, ::-1, :]
    if angle != 0.0:
        out = ndimage.rotate(out, angle, axes=(2, 1), reshape=False, order=1, mode="constant", cval=0.0)
    return MultiViewTensor(np.ascontiguousarray(out))


def build_tensor(volume: CtVolume, indices: dict[View, int], target: int = TARGET_SIZE) -> MultiViewTensor:
    """Standardized 2.5D triplets at the given per-view indices, fused into nine channels."""
    triplets = []
    for view in VIEWS:
        slices = [standardize(s, target) for s in extract_view(volume, view)]
        triplets.append(make_triplet(slices, indices[view]))
    return fuse_views(*triplets)


# ---------------------------------------------------------------------------
# export

def to_uint8(data: np.ndarray) -> np.ndarray:
    return np.round(255.0 * np.clip(np.asarray(data, dtype=np.float64), 0.0, 1.0)).astype(np.uint8)


def write_image(data: np.ndarray, path: str | os.PathLike) -> None:
    """8-bit grayscale PGM or PNG (by suffix) with ``value = round(255 * v)``."""
    path = Path(path)
    pixels = to_uint8(data)
    try:
        if path.suffix.lower() == ".pgm":
            rows, cols = pixels.shape
            path.write_bytes(f"P5\n{cols} {rows}\n255\n".encode() + pixels.tobytes())
        else:
            from PIL import Image
            Image.fromarray(pixels, mode="L").save(path)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def dump_tensor(tensor: MultiViewTensor, path: str | os.PathLike) -> tuple[Path, Path]:
    """Raw little-endian float32 channels plus a JSON sidecar with dims and channel order."""
    raw = Path(path)
    sidecar = raw.with_suffix(raw.suffix + ".json")
    meta = {
        "dtype": "float32",
        "byte_order": "little",
        "shape": list(tensor.channels.shape),
        "channel_order": list(MultiViewTensor.CHANNEL_ORDER),
    }
    try:
        raw.write_bytes(tensor.channels.astype("<f4").tobytes(order="C"))
        sidecar.write_text(json.dumps(meta, indent=2))
    except OSError as exc:
        raise IoError(f"cannot write {raw}: {exc}") from exc
    return raw, sidecar


def load_tensor(path: str | os.PathLike) -> MultiViewTensor:
    raw = Path(path)
    meta = json.loads(raw.with_suffix(raw.suffix + ".json").read_text())
    data = np.frombuffer(raw.read_bytes(), dtype="<f4").reshape(meta["shape"])
    return MultiViewTensor(data.astype(np.float32))
