"""Binary morphology on 2-D masks and the boundary weight map.

Pixels outside the image frame count as background for both operators.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

SQUARE_3X3 = frozenset(product((-1, 0, 1), repeat=2))


@dataclass(frozen=True)
class StructuringElement:
    offsets: frozenset = field(default=SQUARE_3X3)

    def __post_init__(self):
        offs = frozenset((int(dy), int(dx)) for dy, dx in self.offsets)
        if (0, 0) not in offs:
            raise ValueError("structuring element must contain the origin")
        if any((-dy, -dx) not in offs for dy, dx in offs):
            raise ValueError("structuring element must be symmetric")
        object.__setattr__(self, "offsets", offs)

    @property
    def radius(self) -> int:
        return max(max(abs(dy), abs(dx)) for dy, dx in self.offsets)


@dataclass(frozen=True)
class WeightSpec:
    boundary_factor: float = 10.0
    iterations: int = 1

    def __post_init__(self):
        if not self.boundary_factor >= 1.0:
            raise ValueError(f"boundary_factor must be >= 1, got {self.boundary_factor}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")


def _shifted_views(mask: np.ndarray, se: StructuringElement):
    r = se.radius
    padded = np.pad(mask, r, mode="constant", constant_values=False)
    h, w = mask.shape
    for dy, dx in se.offsets:
        yield padded[r + dy : r + dy + h, r + dx : r + dx + w]


def _as_bool(mask) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {mask.shape}")
    return mask.astype(bool)


def dilate(mask, se: StructuringElement | None = None, iterations: int = 1) -> np.ndarray:
    se = se or StructuringElement()
    out = _as_bool(mask)
    for _ in range(iterations):
        acc = np.zeros_like(out)
        for view in _shifted_views(out, se):
            acc |= view
        out = acc
    return out


def erode(mask, se: StructuringElement | None = None, iterations: int = 1) -> np.ndarray:
    se = se or StructuringElement()
    out = _as_bool(mask)
    for _ in range(iterations):
        acc = np.ones_like(out)
        for view in _shifted_views(out, se):
            acc &= view
        out = acc
    return out


def boundary_band(mask, se: StructuringElement | None = None, iterations: int = 1) -> np.ndarray:
    """Dilated mask minus eroded mask: the inner edge plus an outer halo."""
    return dilate(mask, se, iterations) & ~erode(mask, se, iterations)


def inner_contour(mask, se: StructuringElement | None = None) -> np.ndarray:
    m = _as_bool(mask)
    return m & ~erode(m, se)


def weight_map(labels, spec: WeightSpec | None = None, se: StructuringElement | None = None) -> np.ndarray:
    """Per-pixel loss weights: ``boundary_factor`` on the penumbra/core bands, 1 elsewhere."""
    spec = spec or WeightSpec()
    labels = np.asarray(labels)
    band = np.zeros(labels.shape, dtype=bool)
    for cls in (1, 2):
        fg = labels == cls
        if fg.any():
            band |= boundary_band(fg, se, spec.iterations)
    return np.where(band, np.float32(spec.boundary_factor), np.float32(1.0)).astype(np.float32)
