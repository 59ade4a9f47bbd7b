"""Tests for finite-difference Jacobians, densities and pullback metrics."""

from __future__ import annotations

import numpy as np
import pytest

from differential import DENSITY_EPS, DensityMap, MetricField, density, jacobian, jacobian_det, pullback_metric
from grid import AXIS_HORIZONTAL, WarpField, flip_field, normalized_grid
from lens import LensParams, warp_field_from_lens


def _field(u: np.ndarray, v: np.ndarray) -> WarpField:
    return WarpField(np.stack([u, v], axis=-1))


def test_identity_jacobian_is_exact_in_interior():
    jac = jacobian(normalized_grid(16, 16))
    assert np.max(np.abs(jac[1:-1, 1:-1] - np.eye(2))) < 1e-12


def test_affine_jacobian_is_exact():
    base = normalized_grid(12, 12)
    jac = jacobian(_field(2.0 * base.u, base.v))
    assert np.allclose(jac, np.array([[2.0, 0.0], [0.0, 1.0]]), rtol=0.0, atol=1e-12)


def test_quadratic_derivative_exact_at_midpoint():
    base = normalized_grid(16, 16)
    jac = jacobian(_field(base.u**2, base.v))
    assert jac[5, 8, 0, 0] == pytest.approx(1.0, abs=1e-12)


def test_jacobian_rejects_tiny_fields():
    with pytest.raises(ValueError, match="at least 3x3"):
        jacobian(normalized_grid(2, 5))


def test_density_examples():
    base = normalized_grid(10, 10)
    assert np.allclose(density(base).values[1:-1, 1:-1], 1.0, atol=1e-9)
    assert np.allclose(density(_field(2.0 * base.u, 3.0 * base.v)).values, 6.0, atol=1e-9)
    assert np.allclose(density(flip_field(10, 10, AXIS_HORIZONTAL)).values, 1.0, atol=1e-9)


def test_density_is_clamped_on_collapsed_field():
    collapsed = WarpField(np.zeros((6, 6, 2)))
    assert np.all(density(collapsed).values == DENSITY_EPS)


def test_density_map_validation():
    with pytest.raises(ValueError, match="strictly positive"):
        DensityMap(np.zeros((3, 3)))
    with pytest.raises(ValueError, match="2-D"):
        DensityMap(np.ones(4))


def test_metric_of_identity_and_stretch():
    base = normalized_grid(9, 9)
    identity = pullback_metric(base)
    assert np.allclose(identity.g11, 1.0) and np.allclose(identity.g22, 1.0) and np.allclose(identity.g12, 0.0)
    assert identity.dist[4, 4] == pytest.approx(np.hypot(4 / 9 - 0.5, 4 / 9 - 0.5))

    stretched = pullback_metric(_field(2.0 * base.u, base.v))
    assert np.allclose(stretched.g11, 4.0) and np.allclose(stretched.g22, 1.0) and np.allclose(stretched.g12, 0.0)


def test_metric_is_positive_semidefinite_and_matches_density():
    field = warp_field_from_lens(LensParams(k1=0.8, k2=0.2, p1=0.01, cx=0.45), 24, 24)
    metric = pullback_metric(field)
    det_j = np.abs(jacobian_det(jacobian(field)))

    assert np.all(metric.g11 >= 0) and np.all(metric.g22 >= 0)
    assert np.all(metric.det() >= -1e-12)
    assert np.allclose(metric.det(), det_j**2, rtol=1e-6)


def test_quadratic_metric_converges_at_second_order():
    def interior_error(n: int) -> float:
        base = normalized_grid(n, n)
        x = base.u
        metric = pullback_metric(_field(x**3, base.v))
        return float(np.max(np.abs(metric.g11 - 9.0 * x**4)[1:-1, 1:-1]))

    ratio = interior_error(16) / interior_error(32)
    assert 4.0 * 0.7 <= ratio <= 4.0 * 1.3


def test_metric_stack_round_trip():
    metric = pullback_metric(normalized_grid(5, 7))
    again = MetricField.from_stack(metric.stack())
    assert np.array_equal(again.g12, metric.g12)
    assert np.array_equal(again.dist, metric.dist)
    with pytest.raises(ValueError):
        MetricField.from_stack(np.zeros((5, 7, 3)))


@pytest.mark.parametrize("angle", [0.3, 1.2, np.pi / 2])
def test_density_is_invariant_under_a_rigid_rotation(angle):
    field = warp_field_from_lens(LensParams(k1=0.4, k2=0.1, cx=0.45), 24, 24)
    cos, sin = np.cos(angle), np.sin(angle)
    du, dv = field.u - 0.5, field.v - 0.5
    rotated = _field(0.5 + cos * du - sin * dv + 0.1, 0.5 + sin * du + cos * dv - 0.2)

    assert np.allclose(density(rotated).values, density(field).values, rtol=1e-9, atol=0.0)


def test_metric_of_a_shear_is_j_transpose_j():
    base = normalized_grid(9, 9)
    metric = pullback_metric(_field(base.u + base.v, base.v))

    assert np.allclose(metric.g11, 1.0, atol=1e-9)
    assert np.allclose(metric.g22, 2.0, atol=1e-9)
    assert np.allclose(metric.g12, 1.0, atol=1e-9)
