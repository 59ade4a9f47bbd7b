"""Normalized coordinate grids and the WarpField conditioning representation.

Pixel ``(i_x, i_y)`` of an ``H x W`` image maps to
``(i_x / min(H, W) + s_x, i_y / min(H, W) + s_y)``; the shift places the
centered maximum square crop exactly on ``[0, 1]^2``. Pixel corners are used,
not pixel centers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Final, Optional

import numpy as np

MIN_GRID_SIZE: Final = 2
# Pixel coordinates within this distance of an integer are snapped to it.
PIXEL_SNAP_TOL: Final = 1e-9

AXIS_HORIZONTAL: Final = "horizontal"
AXIS_VERTICAL: Final = "vertical"


@dataclass(frozen=True)
class NormalizedPoint:
    """A point in the undistorted normalized frame."""

    u: float
    v: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.u) and np.isfinite(self.v)):
            raise ValueError(f"NormalizedPoint must be finite, got ({self.u}, {self.v})")


@dataclass
class WarpField:
    """Per-pixel backward map into the undistorted normalized frame.

    ``coords[i_y, i_x] = (u, v)``; ``valid`` flags pixels whose coordinate is
    backed by source content.
    """

    coords: np.ndarray
    valid: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 3 or coords.shape[2] != 2:
            raise ValueError(f"coords must have shape (H, W, 2), got {coords.shape}")
        if self.valid is None:
            valid = np.ones(coords.shape[:2], dtype=bool)
        else:
            valid = np.asarray(self.valid, dtype=bool)
        if valid.shape != coords.shape[:2]:
            raise ValueError(f"valid mask shape {valid.shape} does not match coords {coords.shape[:2]}")
        if not np.all(np.isfinite(coords[valid])):
            raise ValueError("coords must be finite at every valid pixel")
        self.coords = coords
        self.valid = valid

    @property
    def height(self) -> int:
        return int(self.coords.shape[0])

    @property
    def width(self) -> int:
        return int(self.coords.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    @property
    def u(self) -> np.ndarray:
        return self.coords[..., 0]

    @property
    def v(self) -> np.ndarray:
        return self.coords[..., 1]

    def with_valid(self, mask: np.ndarray) -> WarpField:
        return WarpField(self.coords.copy(), np.asarray(mask, dtype=bool) & self.valid)


def _check_dims(height: int, width: int) -> None:
    if int(height) < MIN_GRID_SIZE or int(width) < MIN_GRID_SIZE:
        raise ValueError(f"grid dimensions must be >= {MIN_GRID_SIZE}, got {height}x{width}")


def grid_shift(height: int, width: int) -> tuple[float, float]:
    """Return ``(s_x, s_y)`` in normalized units for an ``H x W`` grid."""
    short = min(height, width)
    if width > height:
        return -(width - height) / (2.0 * short), 0.0
    if height > width:
        return 0.0, -(height - width) / (2.0 * short)
    return 0.0, 0.0


def normalized_grid(height: int, width: int) -> WarpField:
    """Identity WarpField for an ``H x W`` image."""
    _check_dims(height, width)
    short = float(min(height, width))
    s_x, s_y = grid_shift(height, width)
    xs = np.arange(width, dtype=np.float64) / short + s_x
    ys = np.arange(height, dtype=np.float64) / short + s_y
    u, v = np.meshgrid(xs, ys)
    return WarpField(np.stack([u, v], axis=-1))


@dataclass(frozen=True)
class PixelFrame:
    """Maps between normalized coordinates and pixel indices of an image."""

    height: int
    width: int

    def __post_init__(self) -> None:
        _check_dims(self.height, self.width)

    @classmethod
    def of(cls, array: np.ndarray) -> PixelFrame:
        return cls(int(array.shape[0]), int(array.shape[1]))

    @property
    def scale(self) -> float:
        return float(min(self.height, self.width))

    def to_pixels(self, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(x, y)`` pixel positions for ``(..., 2)`` normalized coords."""
        s_x, s_y = grid_shift(self.height, self.width)
        x = (coords[..., 0] - s_x) * self.scale
        y = (coords[..., 1] - s_y) * self.scale
        return _snap(x), _snap(y)

    def to_normalized(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        s_x, s_y = grid_shift(self.height, self.width)
        return np.stack([np.asarray(x) / self.scale + s_x, np.asarray(y) / self.scale + s_y], axis=-1)

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """True where ``(x, y)`` lies inside the sampled pixel domain."""
        with np.errstate(invalid="ignore"):
            return (x >= 0) & (x <= self.width - 1) & (y >= 0) & (y <= self.height - 1)


def _snap(values: np.ndarray) -> np.ndarray:
    nearest = np.rint(values)
    with np.errstate(invalid="ignore"):
        return np.where(np.abs(values - nearest) < PIXEL_SNAP_TOL, nearest, values)


def flip_field(height: int, width: int, axis: str = AXIS_VERTICAL) -> WarpField:
    """Identity grid mirrored about the unit-square center along one axis."""
    base = normalized_grid(height, width)
    coords = base.coords.copy()
    if axis == AXIS_HORIZONTAL:
        coords[..., 0] = 1.0 - coords[..., 0]
    elif axis == AXIS_VERTICAL:
        coords[..., 1] = 1.0 - coords[..., 1]
    else:
        raise ValueError(f"Unsupported flip axis '{axis}'. Supported: {AXIS_HORIZONTAL}, {AXIS_VERTICAL}")
    return WarpField(coords)


def corner_squeeze_field(height: int, width: int, strength: float = 1.0) -> WarpField:
    """Grid whose content is squeezed toward the bottom-right corner.

    Uses ``u = x^p, v = y^p`` with ``p = 1 + strength``, so the top-left region
    varies slowly and carries low content density.
    """
    if not np.isfinite(strength) or strength < 0:
        raise ValueError(f"strength must be finite and >= 0, got {strength}")
    base = normalized_grid(height, width)
    power = 1.0 + float(strength)
    coords = np.sign(base.coords) * np.abs(base.coords) ** power
    return WarpField(coords)


def translated_field(field_: WarpField, du: float = 0.0, dv: float = 0.0, mask: Optional[np.ndarray] = None) -> WarpField:
    """Field with every coordinate shifted by ``(du, dv)``."""
    coords = field_.coords + np.array([du, dv], dtype=np.float64)
    valid = field_.valid if mask is None else mask
    return WarpField(coords, valid)
