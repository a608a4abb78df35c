"""Synthetic ellipsoid phantoms: a CT volume in HU plus its label map."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ConfigError
from .volume_io import BTCV_ORGANS, CtVolume, SegMap

BASE_HU = -30.0
NOISE_SIGMA_HU = 5.0

# added to BASE_HU inside each organ; roughly contrast-enhanced soft tissue
ORGAN_HU_OFFSET = {
    1: 140.0, 2: 170.0, 3: 170.0, 4: 40.0, 5: 80.0, 6: 130.0, 7: 60.0,
    8: 210.0, 9: 180.0, 10: 190.0, 11: 110.0, 12: 90.0, 13: 90.0,
}

Ellipsoid = tuple[int, Sequence[float], Sequence[float]]  # (organ id, center xyz, radii xyz)


def ellipsoid_mask(dims: Sequence[int], center: Sequence[float], radii: Sequence[float]) -> np.ndarray:
    x, y, z = np.ogrid[:dims[0], :dims[1], :dims[2]]
    cx, cy, cz = center
    rx, ry, rz = radii
    return ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 + ((z - cz) / rz) ** 2 <= 1.0


def make_phantom(seed: int, dims: Sequence[int], organs: Sequence[Ellipsoid],
                 spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> tuple[CtVolume, SegMap]:
    """Rasterize ellipsoids; earlier entries win where they overlap.

    Each ellipsoid must fit inside the grid (center +- radius within [0, dim-1]).
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ConfigError(f"dims must be three positive integers, got {dims}")
    labels = np.zeros(dims, dtype=np.int16)
    hu = np.full(dims, BASE_HU)
    for oid, center, radii in organs:
        if oid not in BTCV_ORGANS or oid == 0:
            raise ConfigError(f"organ id {oid} is not a BTCV organ")
        if any(r <= 0 for r in radii):
            raise ConfigError(f"radii {radii} must be positive")
        for c, r, n in zip(center, radii, dims):
            if c - r < 0 or c + r > n - 1:
                raise ConfigError(f"ellipsoid {center}+-{radii} leaves the {dims} grid")
        mask = ellipsoid_mask(dims, center, radii) & (labels == 0)
        labels[mask] = oid
        hu[mask] += ORGAN_HU_OFFSET.get(oid, 100.0)
    rng = np.random.default_rng(seed)
    hu = hu + rng.normal(0.0, NOISE_SIGMA_HU, size=dims)
    return CtVolume(hu, spacing=spacing), SegMap(labels, spacing=spacing)


# centre and radii as fractions of the grid, loosely abdominal
_LAYOUT = [
    (6, (0.40, 0.35, 0.55), (0.22, 0.20, 0.25)),   # liver
    (1, (0.40, 0.72, 0.55), (0.10, 0.09, 0.12)),   # spleen
    (7, (0.32, 0.58, 0.58), (0.10, 0.09, 0.10)),   # stomach
    (2, (0.62, 0.30, 0.40), (0.07, 0.06, 0.11)),   # right kidney
    (3, (0.62, 0.70, 0.40), (0.07, 0.06, 0.11)),   # left kidney
    (8, (0.58, 0.50, 0.50), (0.04, 0.04, 0.30)),   # aorta
    (11, (0.50, 0.55, 0.45), (0.05, 0.12, 0.05)),  # pancreas
]


def random_phantom(seed: int, dims: Sequence[int] = (64, 64, 48), jitter: float = 0.04,
                   organs: Sequence[int] | None = None) -> tuple[CtVolume, SegMap]:
    """Seeded phantom with a fixed abdominal-like layout and jittered centres/radii."""
    rng = np.random.default_rng(seed)
    dims = tuple(int(d) for d in dims)
    chosen = []
    for oid, cf, rf in _LAYOUT:
        dc = rng.uniform(-jitter, jitter, 3)
        dr = rng.uniform(1.0 - 2 * jitter, 1.0 + 2 * jitter, 3)
        if organs is not None and oid not in organs:
            continue
        radii = [max(1.0, f * s * n) for f, s, n in zip(rf, dr, dims)]
        center = []
        for f, d, r, n in zip(cf, dc, radii, dims):
            c = (f + d) * (n - 1)
            center.append(float(np.clip(c, r, n - 1 - r)))
        chosen.append((oid, center, radii))
    return make_phantom(seed, dims, chosen)
