"""Tests for the lens model and distortion sampler."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings as hypothesis_settings
from hypothesis import strategies as st

from grid import NormalizedPoint, normalized_grid
from lens import (
    BRANCH_NONE,
    DEFAULT_SCHEDULE,
    LENS_PRESETS,
    NO_DISTORTION,
    LensParams,
    distort_point,
    fisheye,
    sample_lens_draw,
    warp_field_from_lens,
)


def test_zero_lens_is_identity():
    point = NormalizedPoint(0.3, 0.8)
    moved = distort_point(point, NO_DISTORTION)
    assert (moved.u, moved.v) == pytest.approx((0.3, 0.8), abs=1e-15)
    field = warp_field_from_lens(NO_DISTORTION, 16, 24)
    assert np.array_equal(field.coords, normalized_grid(16, 24).coords)


def test_focal_center_is_fixed():
    lens = LensParams(k1=3.0, k2=1.0, p1=0.02, p2=0.01, cx=0.4, cy=0.6)
    assert distort_point(NormalizedPoint(0.4, 0.6), lens) == NormalizedPoint(0.4, 0.6)


def test_hand_evaluated_radial_term():
    result = distort_point(NormalizedPoint(1.0, 0.5), LensParams(k1=1.0))
    assert result.u == pytest.approx(1.125, abs=1e-12)
    assert result.v == pytest.approx(0.5, abs=1e-12)


def test_positive_k1_moves_outward_monotonically():
    field = warp_field_from_lens(fisheye(2.0), 33, 33)
    ray = field.u[16, 16:] - 0.5
    assert np.all(np.diff(ray) > 0)
    identity = normalized_grid(33, 33).u[16, 16:] - 0.5
    assert np.all(ray[1:] > identity[1:])


def test_lens_params_validation():
    with pytest.raises(ValueError, match="finite"):
        LensParams(k1=float("inf"))
    with pytest.raises(ValueError, match="focal_scale"):
        LensParams(focal_scale=0.0)


def test_lens_record_round_trip():
    lens = LENS_PRESETS["convex"]
    assert LensParams.from_record(lens.to_record()) == lens


def test_lens_record_rejects_unknown_field():
    with pytest.raises(ValueError, match="Unknown lens record field 'k9'"):
        LensParams.from_record("k1=0.5\nk9=1\n")
    with pytest.raises(ValueError, match="not a decimal float"):
        LensParams.from_record("k1=abc\n")


def test_aggressive_stage_scale_range():
    rng = np.random.default_rng(0)
    for _ in range(500):
        draw = sample_lens_draw(rng, 0.9)
        if draw.branch != BRANCH_NONE:
            assert 4.0 <= draw.scale <= 10.0


def test_sampler_rejects_out_of_range_progress(rng):
    with pytest.raises(ValueError, match="progress"):
        sample_lens_draw(rng, 1.5)


@hypothesis_settings(max_examples=50, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2**32 - 1), progress=st.floats(min_value=0.0, max_value=1.0))
def test_sampler_draws_stay_in_support(seed, progress):
    draw = sample_lens_draw(np.random.default_rng(seed), progress)
    params = draw.params
    if draw.branch == BRANCH_NONE:
        assert params.is_identity
        return
    low, high = DEFAULT_SCHEDULE.scale_range(progress)
    assert low <= draw.scale <= high
    assert abs(params.cx - 0.5) <= DEFAULT_SCHEDULE.focal_box / 2.0 + 1e-12
    assert abs(params.cy - 0.5) <= DEFAULT_SCHEDULE.focal_box / 2.0 + 1e-12
    if draw.branch == "positive":
        assert params.k1 >= 0.0 and params.k2 >= 0.0
    else:
        assert params.k1 <= 0.0 and params.k2 <= 0.0
