"""Finite-difference Jacobians of warp fields: densities and pullback metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Final

import numpy as np

from grid import WarpField

DENSITY_EPS: Final = 1e-6
MIN_DIFF_SIZE: Final = 3
ORIGIN: Final = (0.5, 0.5)


@dataclass
class DensityMap:
    """Per-pixel content density ``d > 0``."""

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"DensityMap must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)) or np.any(self.values <= 0):
            raise ValueError("DensityMap values must be finite and strictly positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    def log(self) -> np.ndarray:
        return np.log(self.values)


@dataclass
class MetricField:
    """Pullback metric ``(g11, g22, g12)`` plus a distance-to-origin channel.

    Index 1 is the horizontal image axis, index 2 the vertical one.
    """

    g11: np.ndarray
    g22: np.ndarray
    g12: np.ndarray
    dist: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.g11.shape  # type: ignore[return-value]

    def det(self) -> np.ndarray:
        return self.g11 * self.g22 - self.g12 * self.g12

    def stack(self) -> np.ndarray:
        """Channels ``(g11, g22, g12, dist)`` as an ``(H, W, 4)`` array."""
        return np.stack([self.g11, self.g22, self.g12, self.dist], axis=-1)

    @classmethod
    def from_stack(cls, array: np.ndarray) -> MetricField:
        if array.ndim != 3 or array.shape[2] != 4:
            raise ValueError(f"metric stack must have shape (H, W, 4), got {array.shape}")
        return cls(array[..., 0], array[..., 1], array[..., 2], array[..., 3])


def jacobian(field: WarpField) -> np.ndarray:
    """Per-pixel ``[[du/dx, du/dy], [dv/dx, dv/dy]]`` as an ``(H, W, 2, 2)`` array.

    Central differences in the interior and one-sided on the border, with
    ``Delta = 1 / width`` along both axes.
    """
    if field.height < MIN_DIFF_SIZE or field.width < MIN_DIFF_SIZE:
        raise ValueError(f"jacobian needs a field of at least {MIN_DIFF_SIZE}x{MIN_DIFF_SIZE}, got {field.shape}")
    delta = 1.0 / field.width
    out = np.empty(field.shape + (2, 2), dtype=np.float64)
    for channel in range(2):
        values = field.coords[..., channel]
        out[..., channel, 0] = np.gradient(values, delta, axis=1)
        out[..., channel, 1] = np.gradient(values, delta, axis=0)
    return out


def jacobian_det(jac: np.ndarray) -> np.ndarray:
    return jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]


def density(field: WarpField) -> DensityMap:
    """``max(|det J|, eps)`` of the backward map."""
    return DensityMap(np.maximum(np.abs(jacobian_det(jacobian(field))), DENSITY_EPS))


def distance_to_origin(field: WarpField) -> np.ndarray:
    return np.hypot(field.u - ORIGIN[0], field.v - ORIGIN[1])


def pullback_metric(field: WarpField) -> MetricField:
    """Pullback of the Euclidean metric of the normalized frame, ``J^T J``."""
    jac = jacobian(field)
    u_x, u_y = jac[..., 0, 0], jac[..., 0, 1]
    v_x, v_y = jac[..., 1, 0], jac[..., 1, 1]
    return MetricField(
        g11=u_x * u_x + v_x * v_x,
        g22=u_y * u_y + v_y * v_y,
        g12=u_x * u_y + v_x * v_y,
        dist=distance_to_origin(field),
    )
