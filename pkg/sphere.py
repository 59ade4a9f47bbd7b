"""Spherical polar parametrization for panoramas and sphere textures.

Row 0 is the north pole: the vertical image axis carries the polar angle
``theta(h) = pi * h / H`` and the horizontal axis the azimuth
``alpha(w) = 2 * pi * w / W``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Final

import numpy as np

from differential import DENSITY_EPS, DensityMap, MetricField
from grid import WarpField

DEFAULT_SEAM_FRACTION: Final = 1.0 / 64.0
MAX_SEAM_FRACTION: Final = 0.1
PANORAMA_SHAPE: Final = (512, 1024)
SPHERE_ORIGIN: Final = (math.pi, math.pi / 2.0)
POSITIONAL_SCALE: Final = 1.0


@dataclass(frozen=True)
class PolarGrid:
    """Per-pixel azimuth ``alpha`` and polar angle ``theta``."""

    alpha: np.ndarray
    theta: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.alpha.shape  # type: ignore[return-value]


def _check_dims(height: int, width: int) -> None:
    if height < 2 or width < 2:
        raise ValueError(f"sphere grid dimensions must be >= 2, got {height}x{width}")


def polar_grid(height: int, width: int) -> PolarGrid:
    _check_dims(height, width)
    alpha = 2.0 * math.pi * np.arange(width, dtype=np.float64) / width
    theta = math.pi * np.arange(height, dtype=np.float64) / height
    alpha_grid, theta_grid = np.meshgrid(alpha, theta)
    return PolarGrid(alpha_grid, theta_grid)


def sphere_positional_field(height: int, width: int, scale: float = POSITIONAL_SCALE) -> WarpField:
    """Positional conditioning ``(alpha * sin(theta), theta)``, in radians times ``scale``."""
    if not scale > 0.0:
        raise ValueError(f"scale must be > 0, got {scale}")
    grid = polar_grid(height, width)
    coords = np.stack([grid.alpha * np.sin(grid.theta), grid.theta], axis=-1)
    return WarpField(coords * float(scale))


def sphere_positional_density(height: int, width: int) -> DensityMap:
    grid = polar_grid(height, width)
    return DensityMap(np.maximum(np.abs(np.sin(grid.theta)), DENSITY_EPS))


def sphere_distance(alpha: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Distance to the image-center origin, ``arccos(|cos(alpha - pi) cos(pi/2 - theta)|)``."""
    cosine = np.abs(np.cos(np.asarray(alpha) - SPHERE_ORIGIN[0]) * np.cos(SPHERE_ORIGIN[1] - np.asarray(theta)))
    return np.arccos(np.clip(cosine, 0.0, 1.0))


def sphere_metric_pack(height: int, width: int) -> tuple[MetricField, DensityMap]:
    """Sphere metric ``diag(1, sin^2 theta)`` on the (theta, alpha) axes, with density ``|sin theta|``.

    ``g11`` belongs to the horizontal (alpha) axis and ``g22`` to the
    vertical (theta) axis.
    """
    grid = polar_grid(height, width)
    sin_theta = np.sin(grid.theta)
    metric = MetricField(
        g11=sin_theta * sin_theta,
        g22=np.ones_like(sin_theta),
        g12=np.zeros_like(sin_theta),
        dist=sphere_distance(grid.alpha, grid.theta),
    )
    return metric, DensityMap(np.maximum(np.abs(sin_theta), DENSITY_EPS))


def seam_columns(width: int, fraction: float) -> int:
    if not 0.0 < fraction <= MAX_SEAM_FRACTION:
        raise ValueError(f"seam fraction must be in (0, {MAX_SEAM_FRACTION}], got {fraction}")
    return max(1, math.ceil(fraction * width))


def seam_blend(array: Any, fraction: float = DEFAULT_SEAM_FRACTION, axis: int = -1) -> Any:
    """Overwrite the rightmost columns with the leftmost ones along ``axis``.

    Works on numpy arrays and torch tensors; the input is not modified.
    """
    width = array.shape[axis]
    count = seam_columns(width, fraction)
    out = array.clone() if hasattr(array, "clone") else np.array(array, copy=True)
    axis = axis % out.ndim
    left = [slice(None)] * out.ndim
    right = [slice(None)] * out.ndim
    left[axis] = slice(0, count)
    right[axis] = slice(width - count, width)
    out[tuple(right)] = out[tuple(left)]
    return out


def seam_discrepancy(array: Any, axis: int = -1) -> float:
    """Mean absolute difference between the first and last columns, the two sides of the wrap."""
    values = np.asarray(array.detach().cpu() if hasattr(array, "detach") else array, dtype=np.float64)
    first = np.take(values, 0, axis=axis)
    last = np.take(values, -1, axis=axis)
    return float(np.mean(np.abs(last - first)))


def equirect_to_xyz(h: Any, w: Any, height: int, width: int) -> np.ndarray:
    """Unit vectors for equirectangular pixels; ``theta = 0`` is the north pole ``(0, 0, 1)``."""
    theta = math.pi * np.asarray(h, dtype=np.float64) / height
    alpha = 2.0 * math.pi * np.asarray(w, dtype=np.float64) / width
    sin_theta = np.sin(theta)
    return np.stack([sin_theta * np.cos(alpha), sin_theta * np.sin(alpha), np.cos(theta)], axis=-1)
