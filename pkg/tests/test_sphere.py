"""Tests for spherical conditioning and seam handling."""

from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from attention import AttentionBatch, reweighted_attention
from differential import DENSITY_EPS, density
from sphere import (
    equirect_to_xyz,
    polar_grid,
    seam_blend,
    seam_columns,
    seam_discrepancy,
    sphere_distance,
    sphere_metric_pack,
    sphere_positional_density,
    sphere_positional_field,
)


def test_equator_row_keeps_full_azimuth():
    field = sphere_positional_field(8, 16)
    grid = polar_grid(8, 16)

    assert np.allclose(field.u[4], grid.alpha[4])
    assert np.all(field.v[4] == math.pi / 2)
    assert field.u[4].min() == 0.0 and field.u[4].max() < 2 * math.pi


def test_pole_row_collapses():
    field = sphere_positional_field(8, 16)
    assert np.all(field.u[0] == 0.0)


def test_positional_density():
    densities = sphere_positional_density(12, 8).values
    assert np.allclose(densities[6], 1.0)
    assert densities[2, 0] == pytest.approx(0.5)
    assert np.all(densities[0] == DENSITY_EPS)


def test_metric_pack_at_image_center():
    metric, densities = sphere_metric_pack(64, 128)

    assert metric.g11[32, 64] == pytest.approx(1.0)
    assert metric.g22[32, 64] == 1.0
    assert metric.g12[32, 64] == 0.0
    assert metric.dist[32, 64] == pytest.approx(0.0, abs=1e-12)
    assert densities.values[32, 64] == pytest.approx(1.0)


def test_metric_determinant_is_sin_squared():
    metric, _ = sphere_metric_pack(16, 32)
    sin_theta = np.sin(polar_grid(16, 32).theta)
    assert np.allclose(metric.det(), sin_theta**2)


def test_sphere_distance_hand_value():
    assert sphere_distance(np.array(math.pi / 2), np.array(math.pi / 2)) == pytest.approx(math.pi / 2)


def test_seam_blend_copies_left_columns():
    array = np.arange(24, dtype=np.float64).reshape(3, 8)
    out = seam_blend(array, 0.25)

    assert seam_columns(8, 0.25) == 2
    assert np.array_equal(out[:, 6:], array[:, :2])
    assert np.array_equal(out[:, :6], array[:, :6])
    assert seam_discrepancy(out) == 1.0
    assert seam_discrepancy(array) == 7.0


def test_seam_blend_works_on_tensors_without_mutating():
    tensor = torch.arange(16.0).reshape(1, 1, 2, 8)
    out = seam_blend(tensor, 0.1, axis=-1)

    assert torch.equal(out[..., 7], tensor[..., 0])
    assert tensor[0, 0, 0, 7] == 7.0
    assert seam_discrepancy(out) == 0.0


def test_seam_fraction_bounds():
    with pytest.raises(ValueError, match="seam fraction"):
        seam_columns(20, 0.0)
    with pytest.raises(ValueError, match="seam fraction"):
        seam_columns(20, 0.5)
    assert seam_columns(20, 0.1) == 2


def test_equirect_axis_convention():
    assert np.allclose(equirect_to_xyz(4, 0, 8, 16), [1.0, 0.0, 0.0])
    assert np.allclose(equirect_to_xyz(0, 5, 8, 16), [0.0, 0.0, 1.0])


def test_seam_discrepancy_measures_the_wrap_on_structured_images(rng):
    columns = np.linspace(0.0, 1.0, 32)
    image = columns[None, :] + 0.05 * rng.standard_normal((16, 32))
    blended = seam_blend(image, 0.125)

    assert seam_discrepancy(blended) == pytest.approx(np.mean(np.abs(image[:, 3] - image[:, 0])))
    assert seam_discrepancy(blended) > 0.0
    assert seam_discrepancy(blended) < seam_discrepancy(image)

    periodic = np.cos(2.0 * math.pi * np.arange(64) / 64)[None, :].repeat(4, axis=0)
    assert seam_discrepancy(periodic) == pytest.approx(1.0 - math.cos(2.0 * math.pi / 64))


def test_positional_density_is_the_field_density_up_to_a_constant(rng):
    height, width = 8, 16
    analytic = sphere_positional_density(height, width).values[1:]
    measured = density(sphere_positional_field(height, width)).values[1:]
    ratio = measured / analytic
    assert np.allclose(ratio, 2.0 * math.pi**2 * width / height, rtol=1e-9)

    tokens = analytic.size
    q, k, v = (rng.standard_normal((tokens, 4)) for _ in range(3))
    first = reweighted_attention(AttentionBatch.from_densities(q, k, v, analytic.reshape(-1), dtype=torch.float64))
    second = reweighted_attention(AttentionBatch.from_densities(q, k, v, measured.reshape(-1), dtype=torch.float64))
    assert torch.allclose(first, second, atol=1e-12)


def test_sphere_distance_is_symmetric_about_the_image_center(rng):
    alpha = rng.uniform(0.0, 2.0 * math.pi, 200)
    theta = rng.uniform(0.0, math.pi, 200)
    distance = sphere_distance(alpha, theta)

    assert np.allclose(sphere_distance(2.0 * math.pi - alpha, theta), distance, atol=1e-12)
    assert np.allclose(sphere_distance(alpha, math.pi - theta), distance, atol=1e-12)


def test_equirect_to_xyz_is_unit_norm(rng):
    h = rng.uniform(0.0, 32.0, 500)
    w = rng.uniform(0.0, 64.0, 500)
    xyz = equirect_to_xyz(h, w, 32, 64)

    assert xyz.shape == (500, 3)
    assert np.allclose(np.linalg.norm(xyz, axis=-1), 1.0, atol=1e-12)
