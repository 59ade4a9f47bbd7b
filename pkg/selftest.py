"""Numerical self-checks shared by ``cli selftest`` and the acceptance harness.

Each check returns :class:`evalfid.EvalRecord` lines instead of raising, so a
report can list every result.
"""

from __future__ import annotations

import logging
import math
from typing import Final, Sequence

import numpy as np
import torch

from attention import AttentionBatch, duplication_oracle, reweighted_attention
from denoiser import DenoiserConfig, DenoiserModel, attention_shapes, collate_batch, positional_pack
from differential import jacobian, jacobian_det, pullback_metric
from evalfid import EvalRecord
from grid import WarpField, normalized_grid
from lens import (
    BRANCH_NEGATIVE,
    BRANCH_NONE,
    BRANCH_POSITIVE,
    DEFAULT_SCHEDULE,
    LensDraw,
    WarpSchedule,
    sample_lens_draw,
    sample_lens_params,
    warp_field_from_lens,
)
from sphere import SPHERE_ORIGIN, polar_grid, sphere_distance, sphere_metric_pack

logger = logging.getLogger(__name__)

DUPLICATION_TOL: Final = 1e-6
SCALE_INVARIANCE_TOL: Final = 1e-9
METRIC_REL_TOL: Final = 1e-6
AFFINE_TOL: Final = 1e-9
CONVERGENCE_RATIO: Final = (4.0 * 0.7, 4.0 * 1.3)
DENSITY_SCALES: Final = (0.1, 1.0, 10.0)


def _random_attention_case(rng: np.random.Generator, max_tokens: int = 8, max_dim: int = 16, max_density: int = 5) -> AttentionBatch:
    tokens = int(rng.integers(1, max_tokens + 1))
    dim = int(rng.integers(1, max_dim + 1))
    q, k, v = (rng.standard_normal((tokens, dim)) for _ in range(3))
    densities = rng.integers(1, max_density + 1, size=tokens).astype(np.float64)
    return AttentionBatch.from_densities(q, k, v, densities, dtype=torch.float64)


def check_duplication_equivalence(cases: int = 1000, seed: int = 0) -> list[EvalRecord]:
    """Reweighted attention against physically duplicated tokens, in double precision."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        batch = _random_attention_case(rng)
        diff = (reweighted_attention(batch) - duplication_oracle(batch)).abs().max().item()
        worst = max(worst, float(diff))
    return [EvalRecord("attention.duplication_max_error", worst, f"<={DUPLICATION_TOL:g}", worst <= DUPLICATION_TOL)]


def check_scale_invariance(cases: int = 100, seed: int = 0) -> list[EvalRecord]:
    """Multiplying every density by a constant must leave attention outputs unchanged."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        tokens, dim = int(rng.integers(2, 17)), int(rng.integers(1, 17))
        q, k, v = (rng.standard_normal((tokens, dim)) for _ in range(3))
        densities = rng.uniform(0.05, 20.0, size=tokens)
        reference = reweighted_attention(AttentionBatch.from_densities(q, k, v, densities, dtype=torch.float64))
        for scale in DENSITY_SCALES:
            scaled = reweighted_attention(AttentionBatch.from_densities(q, k, v, densities * scale, dtype=torch.float64))
            worst = max(worst, float((scaled - reference).abs().max().item()))
    return [EvalRecord("attention.scale_invariance_max_diff", worst, f"<{SCALE_INVARIANCE_TOL:g}", worst < SCALE_INVARIANCE_TOL)]


def _cubic_field(size: int) -> WarpField:
    base = normalized_grid(size, size)
    return WarpField(np.stack([base.u ** 3, base.v ** 3 + base.u], axis=-1))


def _interior_jacobian_error(size: int) -> float:
    field = _cubic_field(size)
    jac = jacobian(field)
    exact_ux = 3.0 * field.u ** 2
    return float(np.max(np.abs(jac[1:-1, 1:-1, 0, 0] - exact_ux[1:-1, 1:-1])))


def check_differential_consistency(fields: int = 100, size: int = 32, seed: int = 0) -> list[EvalRecord]:
    """``det g = d^2`` on random lens fields, exact affine Jacobians, second-order convergence."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(fields):
        lens = sample_lens_params(rng, float(rng.uniform()))
        field = warp_field_from_lens(lens, size, size)
        det_j = np.abs(jacobian_det(jacobian(field)))
        metric = pullback_metric(field)
        det_g = metric.det()
        nonzero = det_j > 0.0
        if nonzero.any():
            rel = np.abs(det_g[nonzero] - det_j[nonzero] ** 2) / det_j[nonzero] ** 2
            worst = max(worst, float(rel.max()))

    a, b, c, d = rng.uniform(-2.0, 2.0, size=4)
    base = normalized_grid(size, size)
    affine = WarpField(np.stack([a * base.u + b * base.v + 0.1, c * base.u + d * base.v - 0.2], axis=-1))
    affine_error = float(np.max(np.abs(jacobian(affine) - np.array([[a, b], [c, d]]))))

    ratios = [_interior_jacobian_error(n) / _interior_jacobian_error(2 * n) for n in (16, 32)]
    low, high = CONVERGENCE_RATIO
    return [
        EvalRecord("differential.metric_density_rel_error", worst, f"<={METRIC_REL_TOL:g}", worst <= METRIC_REL_TOL),
        EvalRecord("differential.affine_jacobian_error", affine_error, f"<={AFFINE_TOL:g}", affine_error <= AFFINE_TOL),
        EvalRecord(
            "differential.convergence_ratio_min",
            min(ratios),
            f"[{low:g},{high:g}]",
            all(low <= ratio <= high for ratio in ratios),
        ),
    ]


def check_sphere_pack(height: int = 64, width: int = 128) -> list[EvalRecord]:
    metric, densities = sphere_metric_pack(height, width)
    grid = polar_grid(height, width)
    sin_theta = np.sin(grid.theta)
    exact = bool(np.array_equal(metric.g11, sin_theta * sin_theta) and np.all(metric.g22 == 1.0) and np.all(metric.g12 == 0.0))
    density_error = float(np.max(np.abs(densities.values - np.abs(sin_theta))))
    center = float(metric.dist[height // 2, width // 2])

    rng = np.random.default_rng(7)
    probes = rng.uniform([0.0, 0.0], [2.0 * math.pi, math.pi], size=(10, 2))
    hand = [math.acos(min(1.0, abs(math.cos(alpha - SPHERE_ORIGIN[0]) * math.cos(SPHERE_ORIGIN[1] - theta)))) for alpha, theta in probes]
    probe_error = float(np.max(np.abs(sphere_distance(probes[:, 0], probes[:, 1]) - np.array(hand))))
    return [
        EvalRecord("sphere.metric_exact", float(exact), "==1", exact),
        EvalRecord("sphere.density_error", density_error, "<=1e-06", density_error <= 1e-6),
        EvalRecord("sphere.center_distance", center, "==0", center == 0.0),
        EvalRecord("sphere.probe_distance_error", probe_error, "<=1e-09", probe_error <= 1e-9),
    ]


def check_sampler_distribution(draws: int = 10_000, seed: int = 0, schedule: WarpSchedule = DEFAULT_SCHEDULE) -> list[EvalRecord]:
    rng = np.random.default_rng(seed)
    branches = {BRANCH_NONE: 0, BRANCH_POSITIVE: 0, BRANCH_NEGATIVE: 0}
    violations = 0
    for index in range(draws):
        progress = index / max(draws - 1, 1)
        draw = sample_lens_draw(rng, progress, schedule)
        branches[draw.branch] += 1
        violations += _support_violations(draw, progress, schedule)
    distorted = branches[BRANCH_POSITIVE] + branches[BRANCH_NEGATIVE]
    none_rate = branches[BRANCH_NONE] / draws
    positive_rate = branches[BRANCH_POSITIVE] / max(distorted, 1)
    return [
        EvalRecord("sampler.no_distortion_rate", none_rate, "0.30+-0.02", abs(none_rate - 0.30) <= 0.02),
        EvalRecord("sampler.positive_branch_rate", positive_rate, "0.50+-0.02", abs(positive_rate - 0.50) <= 0.02),
        EvalRecord("sampler.support_violations", float(violations), "==0", violations == 0),
    ]


def _support_violations(draw: LensDraw, progress: float, schedule: WarpSchedule) -> int:
    params = draw.params
    if draw.branch == BRANCH_NONE:
        return int(not params.is_identity)
    scale_low, scale_high = schedule.scale_range(progress)
    if not scale_low <= draw.scale <= scale_high:
        return 1
    if draw.branch == BRANCH_POSITIVE:
        k1, k2, p = schedule.positive_k1, schedule.positive_k2, schedule.positive_p
    else:
        k1, k2, p = schedule.negative_k1, schedule.negative_k2, schedule.negative_p
    s = draw.scale
    half_box = schedule.focal_box / 2.0
    checks = [
        _within(params.k1, k1, s),
        _within(params.k2, k2, s),
        _within(params.p1, p, s),
        _within(params.p2, p, s),
        abs(params.cx - 0.5) <= half_box,
        abs(params.cy - 0.5) <= half_box,
    ]
    return int(not all(checks))


def _within(value: float, support: tuple[float, float], scale: float) -> bool:
    low, high = sorted((support[0] * scale, support[1] * scale))
    slack = 1e-12 * max(1.0, abs(low), abs(high))
    return low - slack <= value <= high + slack


def check_zero_init_parity(seed: int = 0, size: int = 16) -> list[EvalRecord]:
    """An untrained model must ignore its conditioning channels bit-exactly."""
    torch.manual_seed(seed)
    model = DenoiserModel(DenoiserConfig(base_channels=16, num_heads=2))
    with torch.no_grad():
        model.out_conv.weight.normal_()
    rng = np.random.default_rng(seed)
    lens = sample_lens_params(rng, 1.0)
    pack = positional_pack(warp_field_from_lens(lens, size, size), attention_shapes(size, size))
    image = rng.uniform(size=(size, size, 1))
    conditioned = collate_batch([image], [0], [pack])
    zeroed = collate_batch([image], [0], [pack.with_zero_channels()])
    t = torch.tensor([17])
    model.eval()
    with torch.no_grad():
        first = model(conditioned.images, t, conditioned.class_ids, conditioned.cond, conditioned.log_density)
        second = model(zeroed.images, t, zeroed.class_ids, zeroed.cond, zeroed.log_density)
    same = bool(torch.equal(first, second))
    return [EvalRecord("denoiser.zero_init_parity", float(same), "==1", same)]


def run_selftest(cases: int = 1000, seed: int = 0) -> list[EvalRecord]:
    records: list[EvalRecord] = []
    records += check_duplication_equivalence(cases, seed)
    records += check_scale_invariance(seed=seed)
    records += check_differential_consistency(seed=seed)
    records += check_sphere_pack()
    for record in records:
        logger.debug("selftest %s", record.line())
    return records


def all_passed(records: Sequence[EvalRecord]) -> bool:
    return all(record.passed for record in records)
