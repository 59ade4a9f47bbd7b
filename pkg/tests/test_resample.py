"""Tests for remapping, unwarping and warp-then-crop."""

from __future__ import annotations

import numpy as np
import pytest

from evalfid import psnr
from grid import normalized_grid, translated_field
from lens import NO_DISTORTION, LensParams, fisheye, warp_field_from_lens
from resample import (
    CropBox,
    CropFraction,
    as_image,
    centered_crop,
    plan_crop,
    posthoc_warp,
    random_crop,
    remap,
    required_render_res,
    sampling_magnification,
    unwarp,
    warp_then_crop,
)


def _gradient(size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size] / (size - 1.0)
    return (0.2 + 0.5 * xs + 0.3 * ys * ys)[..., None]


def test_as_image_accepts_gray_and_rejects_bad_shapes():
    assert as_image(np.zeros((4, 5))).shape == (4, 5, 1)
    with pytest.raises(ValueError, match="shape"):
        as_image(np.zeros((4, 5, 2)))
    with pytest.raises(ValueError, match="finite"):
        as_image(np.full((3, 3), np.nan))


def test_identity_remap_is_exact(rng):
    src = rng.uniform(size=(12, 17, 3))
    out, covered = remap(src, normalized_grid(12, 17))

    assert np.array_equal(out, src)
    assert covered.all()


def test_translated_field_uncovers_right_half(rng):
    src = rng.uniform(size=(16, 16, 1))
    out, covered = remap(src, translated_field(normalized_grid(16, 16), du=0.5))

    assert covered[:, :8].all()
    assert not covered[:, 9:].any()
    assert np.all(out[~covered] == 0.0)
    assert np.array_equal(out[:, :8], src[:, 8:])


def test_strong_fisheye_uncovers_corners():
    _, covered = remap(_gradient(64), warp_field_from_lens(fisheye(10.0), 64, 64))
    assert not covered[0, 0] and not covered[-1, -1]
    assert covered[32, 32]


def test_identity_unwarp_is_exact(rng):
    src = rng.uniform(size=(10, 10, 1))
    out, covered = unwarp(src, normalized_grid(10, 10), (10, 10))

    assert covered.all()
    assert np.allclose(out, src, atol=1e-9)


def test_round_trip_recovers_smooth_gradient():
    source = _gradient(96)
    field = warp_field_from_lens(LensParams(k1=0.2), 96, 96)
    warped, covered = remap(source, field)
    rectified, rect_covered = unwarp(warped, field, (96, 96), mask=covered)

    assert rect_covered.mean() > 0.5
    assert psnr(rectified, source, rect_covered) >= 30.0


def test_unwarp_rejects_mismatched_image():
    with pytest.raises(ValueError, match="does not match field"):
        unwarp(np.zeros((8, 8, 1)), normalized_grid(6, 6), (6, 6))


def test_full_frame_crop_of_zero_lens_is_identity_grid():
    source = _gradient(32)
    image, field = warp_then_crop(source, NO_DISTORTION, CropBox(0, 0, 32), 16)

    assert np.allclose(field.coords, normalized_grid(16, 16).coords, atol=1e-12)
    assert field.valid.all()
    assert np.allclose(image, source[::2, ::2])


def test_interior_crop_is_fully_covered():
    image, field = warp_then_crop(_gradient(64), LensParams(k1=0.5), CropBox(24, 24, 16), 16)
    assert field.valid.all()
    assert image.shape == (16, 16, 1)


def test_warp_then_crop_validates_sizes():
    with pytest.raises(ValueError, match="smaller than model_res"):
        warp_then_crop(_gradient(8), NO_DISTORTION, CropBox(0, 0, 8), 16)
    with pytest.raises(ValueError, match="exceeds"):
        warp_then_crop(_gradient(32), NO_DISTORTION, CropBox(20, 0, 16), 16)


def test_random_crop_boxes_stay_inside(rng):
    for _ in range(100):
        box = random_crop(rng).box(40, 16)
        box.check_inside(40, 40)
        assert 16 <= box.side <= 40
    with pytest.raises(ValueError, match="side"):
        CropFraction(0.0, 0.0, 0.0)
    with pytest.raises(ValueError, match="left"):
        CropFraction(0.5, 0.0, 1.5)


def test_crop_lens_field_matches_the_cropped_native_field():
    lens = LensParams(k1=0.5, p1=0.01)
    crop = CropFraction(0.5, 0.5, 0.5)
    box = crop.box(64, 16)
    _, field = warp_then_crop(_gradient(64), lens, box, 16)

    assert box == CropBox(16, 16, 32)
    assert np.allclose(field.coords, crop.lens_field(lens, 16).coords, atol=1e-12)


def test_identity_plan_renders_just_enough():
    assert plan_crop(NO_DISTORTION, CropFraction(1.0, 0.0, 0.0), 16) == (CropFraction(1.0, 0.0, 0.0), 32)
    assert plan_crop(NO_DISTORTION, CropFraction(0.5, 0.2, 0.7), 16)[1] == 34


def test_barrel_lens_raises_render_resolution():
    lens = LensParams(k1=-0.4, k2=-0.24)
    crop, render_res = plan_crop(lens, CropFraction(0.6, 0.5, 0.5), 16)
    _, field = warp_then_crop(_gradient(render_res), lens, crop.box(render_res, 16), 16)

    assert render_res > 32
    assert sampling_magnification(field, (render_res, render_res)) <= 1.0


def test_folding_crop_is_recentred_on_the_focal_point():
    lens = LensParams(k1=-0.4, k2=-0.24, cx=0.65, cy=0.65)
    assert required_render_res(lens, CropFraction(1.0, 0.0, 0.0), 16) == float("inf")

    crop, render_res = plan_crop(lens, CropFraction(1.0, 0.0, 0.0), 16)
    assert crop == centered_crop(lens)
    assert crop.top == pytest.approx(0.8) and crop.left == pytest.approx(0.8)
    assert render_res < 8 * 16


def test_double_resolution_render_does_not_magnify():
    _, field = warp_then_crop(_gradient(128), LensParams(k1=2.0), CropBox(0, 0, 128), 64)
    assert sampling_magnification(field, (128, 128)) <= 1.0


def test_tight_crop_magnifies():
    _, field = warp_then_crop(_gradient(64), NO_DISTORTION, CropBox(0, 0, 32), 64)
    assert sampling_magnification(field, (64, 64)) == pytest.approx(2.0)


def test_posthoc_warp_matches_remap(rng):
    image = rng.uniform(size=(16, 16, 1))
    field = warp_field_from_lens(fisheye(3.0), 16, 16)
    assert np.array_equal(posthoc_warp(image, field)[0], remap(image, field)[0])
