"""Remap images through warp fields, invert them, and build warped training crops."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Final, Optional

import numpy as np
from scipy.ndimage import map_coordinates

from differential import jacobian, jacobian_det
from grid import PixelFrame, WarpField, normalized_grid
from lens import LensParams, distort_coords, warp_field_from_lens

logger = logging.getLogger(__name__)

UNWARP_MAX_ITER: Final = 30
UNWARP_TOL: Final = 1e-4
UNWARP_DAMPING: Final = 0.8
CROP_SIDE_RANGE: Final = (0.5, 1.0)
RENDER_OVERSAMPLE: Final = 2
MAX_RENDER_OVERSAMPLE: Final = 8
MAGNIFICATION_MARGIN: Final = 1.05
# Planning still counts coordinates this far outside the source frame.
PLAN_FRAME_SLACK: Final = 0.05
# A bilinear sample counts as covered only if all contributing neighbours are.
COVERAGE_TOL: Final = 1e-9
SINGULAR_DET: Final = 1e-12


def as_image(array: np.ndarray) -> np.ndarray:
    """Validate and return an ``(H, W, C)`` float64 image with C in {1, 3}."""
    image = np.asarray(array, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise ValueError(f"image must have shape (H, W) or (H, W, 1|3), got {np.shape(array)}")
    if image.shape[0] < 2 or image.shape[1] < 2:
        raise ValueError(f"image dimensions must be >= 2, got {image.shape[:2]}")
    if not np.all(np.isfinite(image)):
        raise ValueError("image values must be finite")
    return image


def _bilinear(values: np.ndarray, y: np.ndarray, x: np.ndarray) -> np.ndarray:
    return map_coordinates(values, [y, x], order=1, mode="nearest", prefilter=False)


def _sample_channels(image: np.ndarray, y: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.stack([_bilinear(image[..., c], y, x) for c in range(image.shape[2])], axis=-1)


def _sample_mask(mask: np.ndarray, y: np.ndarray, x: np.ndarray) -> np.ndarray:
    return _bilinear(mask.astype(np.float64), y, x) >= 1.0 - COVERAGE_TOL


def remap(
    src: np.ndarray,
    field: WarpField,
    src_frame: Optional[PixelFrame] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Bilinearly sample ``src`` at every field coordinate.

    Samples outside the source frame are uncovered and filled with 0.
    """
    image = as_image(src)
    frame = src_frame or PixelFrame.of(image)
    x, y = frame.to_pixels(field.coords)
    covered = frame.contains(x, y) & field.valid
    x = np.where(covered, x, 0.0)
    y = np.where(covered, y, 0.0)
    out = _sample_channels(image, y, x)
    out[~covered] = 0.0
    return out, covered


def unwarp(
    img: np.ndarray,
    field: WarpField,
    out_dims: tuple[int, int],
    *,
    mask: Optional[np.ndarray] = None,
    max_iter: int = UNWARP_MAX_ITER,
    tol: float = UNWARP_TOL,
    damping: float = UNWARP_DAMPING,
) -> tuple[np.ndarray, np.ndarray]:
    """Map a warped image back to the undistorted frame.

    For each undistorted pixel the warped-image location whose field value
    reaches it is found by damped Newton iteration on the bilinearly
    interpolated field, starting from the identity. Pixels that do not
    converge, or land outside the warped frame, are uncovered.
    """
    image = as_image(img)
    if image.shape[:2] != field.shape:
        raise ValueError(f"image shape {image.shape[:2]} does not match field shape {field.shape}")
    out_h, out_w = (int(d) for d in out_dims)
    targets = normalized_grid(out_h, out_w).coords
    frame = PixelFrame(field.height, field.width)

    x, y = frame.to_pixels(targets)
    jac_pix = jacobian(field) / field.width
    coords = field.coords
    target_u, target_v = targets[..., 0], targets[..., 1]
    active = np.ones(targets.shape[:2], dtype=bool)
    singular = np.zeros_like(active)

    for _ in range(max_iter):
        if not active.any():
            break
        ay, ax = y[active], x[active]
        cy = np.clip(ay, 0, field.height - 1)
        cx = np.clip(ax, 0, field.width - 1)
        r_u = target_u[active] - _bilinear(coords[..., 0], cy, cx)
        r_v = target_v[active] - _bilinear(coords[..., 1], cy, cx)
        done = np.hypot(r_u, r_v) < tol

        a = _bilinear(jac_pix[..., 0, 0], cy, cx)
        b = _bilinear(jac_pix[..., 0, 1], cy, cx)
        c = _bilinear(jac_pix[..., 1, 0], cy, cx)
        d = _bilinear(jac_pix[..., 1, 1], cy, cx)
        det = a * d - b * c
        bad = np.abs(det) < SINGULAR_DET
        safe_det = np.where(bad, 1.0, det)
        step_x = (d * r_u - b * r_v) / safe_det
        step_y = (a * r_v - c * r_u) / safe_det
        move = ~done & ~bad

        idx = np.flatnonzero(active)
        x.flat[idx[move]] = ax[move] + damping * step_x[move]
        y.flat[idx[move]] = ay[move] + damping * step_y[move]
        singular.flat[idx[bad & ~done]] = True
        active.flat[idx[done | bad]] = False

    inside = frame.contains(x, y)
    cy = np.clip(y, 0, field.height - 1)
    cx = np.clip(x, 0, field.width - 1)
    residual = np.hypot(target_u - _bilinear(coords[..., 0], cy, cx), target_v - _bilinear(coords[..., 1], cy, cx))
    covered = inside & ~singular & (residual < tol) & _sample_mask(field.valid, cy, cx)
    if mask is not None:
        covered &= _sample_mask(np.asarray(mask, dtype=bool), cy, cx)

    out = _sample_channels(image, np.where(covered, y, 0.0), np.where(covered, x, 0.0))
    out[~covered] = 0.0
    logger.debug("unwarp: %d of %d pixels uncovered", int((~covered).sum()), covered.size)
    return out, covered


@dataclass(frozen=True)
class CropBox:
    """Square crop in source pixel indices."""

    top: int
    left: int
    side: int

    def check_inside(self, height: int, width: int) -> None:
        if self.side < 2 or self.top < 0 or self.left < 0:
            raise ValueError(f"invalid crop {self}")
        if self.top + self.side > height or self.left + self.side > width:
            raise ValueError(f"crop {self} exceeds image bounds {height}x{width}")


@dataclass(frozen=True)
class CropFraction:
    """Resolution-free square crop of a square source.

    ``side`` is a fraction of the source side; ``top`` and ``left`` place the
    crop within the remaining margin, 0 at the top-left and 1 at the far edge.
    """

    side: float
    top: float
    left: float

    def __post_init__(self) -> None:
        if not 0.0 < self.side <= 1.0:
            raise ValueError(f"CropFraction.side must be in (0, 1], got {self.side}")
        for name in ("top", "left"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"CropFraction.{name} must be in [0, 1], got {getattr(self, name)}")

    def box(self, size: int, min_side: int) -> CropBox:
        side = int(np.clip(round(self.side * size), min_side, size))
        free = size - side
        return CropBox(int(round(self.top * free)), int(round(self.left * free)), side)

    def lens_field(self, lens: LensParams, model_res: int) -> WarpField:
        """The crop's warp field at model resolution, evaluated from the lens directly."""
        free = 1.0 - self.side
        steps = np.arange(model_res, dtype=np.float64) * (self.side / model_res)
        u, v = np.meshgrid(self.left * free + steps, self.top * free + steps)
        du, dv = distort_coords(u, v, lens)
        return WarpField(np.stack([du, dv], axis=-1))


def random_crop(rng: np.random.Generator) -> CropFraction:
    return CropFraction(float(rng.uniform(*CROP_SIDE_RANGE)), float(rng.uniform()), float(rng.uniform()))


def centered_crop(lens: LensParams, side: float = CROP_SIDE_RANGE[0]) -> CropFraction:
    """Crop of the given side centred on the lens focal point, clamped to the frame."""
    free = 1.0 - side
    if free <= 0.0:
        return CropFraction(side, 0.0, 0.0)
    top = float(np.clip((lens.cy - side / 2.0) / free, 0.0, 1.0))
    left = float(np.clip((lens.cx - side / 2.0) / free, 0.0, 1.0))
    return CropFraction(side, top, left)


def required_render_res(lens: LensParams, crop: CropFraction, model_res: int) -> float:
    """Smallest square source resolution at which ``crop`` is not up-sampled.

    Returns ``inf`` when the warp folds inside the crop.
    """
    field = crop.lens_field(lens, model_res)
    inside = (
        (field.u >= -PLAN_FRAME_SLACK)
        & (field.u <= 1.0 + PLAN_FRAME_SLACK)
        & (field.v >= -PLAN_FRAME_SLACK)
        & (field.v <= 1.0 + PLAN_FRAME_SLACK)
    )
    if not inside.any():
        return 0.0
    jac = jacobian(field)
    if np.any(jacobian_det(jac)[inside] <= 0.0):
        return float("inf")
    smallest = float(np.linalg.svd(jac, compute_uv=False)[..., -1][inside].min())
    return model_res * MAGNIFICATION_MARGIN / smallest


def plan_crop(lens: LensParams, crop: CropFraction, model_res: int) -> tuple[CropFraction, int]:
    """Choose the render resolution so that ``crop`` keeps magnification <= 1.

    The source is rendered at least ``RENDER_OVERSAMPLE`` times ``model_res``
    and at most ``MAX_RENDER_OVERSAMPLE`` times. When even the largest render
    would up-sample, the crop is replaced by the smallest crop around the
    focal point, where the warp is closest to the identity.
    """
    floor = RENDER_OVERSAMPLE * model_res
    ceiling = MAX_RENDER_OVERSAMPLE * model_res
    needed = required_render_res(lens, crop, model_res)
    if needed > ceiling:
        logger.debug("crop %s needs a %.4g px render; recentring on the focal point", crop, needed)
        crop = centered_crop(lens)
        needed = required_render_res(lens, crop, model_res)
    if not np.isfinite(needed) or needed > ceiling:
        return crop, ceiling
    return crop, max(floor, math.ceil(needed))


def warp_then_crop(
    src: np.ndarray,
    lens: LensParams,
    crop: CropBox,
    model_res: int,
) -> tuple[np.ndarray, WarpField]:
    """Distort at native resolution, then crop and resize image and field together.

    The returned field's ``valid`` mask is the coverage of the returned image.
    """
    image = as_image(src)
    height, width = image.shape[:2]
    if min(height, width) < model_res:
        raise ValueError(f"source resolution {height}x{width} is smaller than model_res {model_res}")
    crop.check_inside(height, width)

    native_field = warp_field_from_lens(lens, height, width)
    warped, covered = remap(image, native_field)

    steps = np.arange(model_res, dtype=np.float64) * (crop.side / model_res)
    x, y = np.meshgrid(crop.left + steps, crop.top + steps)
    out = _sample_channels(warped, y, x)
    coords = np.stack([_bilinear(native_field.coords[..., c], y, x) for c in range(2)], axis=-1)
    valid = _sample_mask(covered, y, x)
    out[~valid] = 0.0
    return out, WarpField(coords, valid)


def sampling_magnification(field: WarpField, src_shape: tuple[int, int]) -> float:
    """Largest local magnification, in output pixels per source pixel, over valid pixels.

    Values above 1 mean some region of the source is up-scaled.
    """
    if not field.valid.any():
        return 0.0
    scale = min(src_shape[0], src_shape[1]) / field.width
    singular_values = np.linalg.svd(jacobian(field) * scale, compute_uv=False)
    smallest = singular_values[..., -1][field.valid]
    if np.any(smallest <= 0):
        return float("inf")
    return float(np.max(1.0 / smallest))


def posthoc_warp(image: np.ndarray, field: WarpField) -> tuple[np.ndarray, np.ndarray]:
    """Naive baseline: resample an already generated, undistorted image with ``field``."""
    return remap(image, field)
