"""Tests for the numerical self-checks."""

from __future__ import annotations

from selftest import (
    all_passed,
    check_differential_consistency,
    check_duplication_equivalence,
    check_sampler_distribution,
    check_scale_invariance,
    check_sphere_pack,
    run_selftest,
)


def test_duplication_check_passes():
    records = check_duplication_equivalence(cases=100, seed=2)
    assert records[0].name == "attention.duplication_max_error"
    assert all_passed(records)


def test_scale_invariance_check_passes():
    assert all_passed(check_scale_invariance(cases=20, seed=1))


def test_differential_check_passes_and_reports_order_two():
    records = {record.name: record for record in check_differential_consistency(fields=20, size=24, seed=4)}

    assert all(record.passed for record in records.values())
    assert 3.5 <= records["differential.convergence_ratio_min"].value <= 4.5


def test_metric_density_check_covers_every_pixel_of_aggressive_fields():
    records = {record.name: record for record in check_differential_consistency(fields=100, size=32, seed=0)}
    assert records["differential.metric_density_rel_error"].passed


def test_sphere_pack_check_passes():
    assert all_passed(check_sphere_pack(32, 64))


def test_sampler_distribution_check_passes():
    records = {record.name: record for record in check_sampler_distribution(draws=10_000, seed=0)}

    assert records["sampler.support_violations"].value == 0.0
    assert all(record.passed for record in records.values())


def test_run_selftest_lists_every_check():
    records = run_selftest(cases=50, seed=0)
    names = [record.name for record in records]

    assert names[0] == "attention.duplication_max_error"
    assert "sphere.metric_exact" in names
    assert all_passed(records)
