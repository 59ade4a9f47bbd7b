"""Geometric fidelity metrics with analytic oracles on procedural patterns."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Final, Optional, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from datagen import FAMILY_GRADIENT, FAMILY_STRIPES_H, FAMILY_STRIPES_V, PatternSpec, render_pattern
from grid import WarpField
from lens import FIDELITY_K1_LEVELS, fisheye, warp_field_from_lens
from resample import as_image, remap, unwarp

logger = logging.getLogger(__name__)

ORIENTATION_HORIZONTAL: Final = "horizontal"
ORIENTATION_VERTICAL: Final = "vertical"
STRIPE_ORIENTATION: Final = {FAMILY_STRIPES_H: ORIENTATION_HORIZONTAL, FAMILY_STRIPES_V: ORIENTATION_VERTICAL}

K1_SEARCH_RANGE: Final = (-0.5, 26.0)
K1_SEARCH_STEPS: Final = (0.5, 0.05, 0.005)
MIN_SEARCH_COVERAGE: Final = 0.2
MIN_STRUCTURE_VARIANCE: Final = 1e-6
RELIABLE_STRAIGHTNESS: Final = 0.25
RELIABLE_TEMPLATE_MISMATCH: Final = 0.3
PHASE_SEARCH_STEPS: Final = 24
PHASE_SEARCH_XTOL: Final = 1e-3
K1_TOLERANCE: Final = 0.10
CONTROL_ERROR_FACTOR: Final = 2.0


@dataclass
class DisplacementField:
    """Per-pixel ``(dx, dy)`` in pixels."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3 or values.shape[2] != 2:
            raise ValueError(f"displacement must have shape (H, W, 2), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("displacement values must be finite")
        self.values = values

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[:2]  # type: ignore[return-value]

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.values[..., 0], self.values[..., 1])


def conditioning_displacement(field: WarpField, res: Optional[int] = None) -> DisplacementField:
    """``(res * u - x, res * v - y)`` for every pixel; ``res`` defaults to the short side."""
    scale = float(res if res is not None else min(field.shape))
    x, y = np.meshgrid(np.arange(field.width, dtype=np.float64), np.arange(field.height, dtype=np.float64))
    return DisplacementField(np.stack([scale * field.u - x, scale * field.v - y], axis=-1))


def displacement_error(a: DisplacementField, b: DisplacementField) -> float:
    """Mean per-pixel l2 norm of ``a - b``."""
    if a.shape != b.shape:
        raise ValueError(f"displacement shapes differ: {a.shape} vs {b.shape}")
    diff = a.values - b.values
    return float(np.mean(np.hypot(diff[..., 0], diff[..., 1])))


def _gray(img: np.ndarray) -> np.ndarray:
    return as_image(img).mean(axis=2)


def _oriented(img: np.ndarray, orientation: str, mask: Optional[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    gray = _gray(img)
    valid = np.ones(gray.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if valid.shape != gray.shape:
        raise ValueError(f"mask shape {valid.shape} does not match image {gray.shape}")
    if orientation == ORIENTATION_HORIZONTAL:
        return gray, valid
    if orientation == ORIENTATION_VERTICAL:
        return gray.T, valid.T
    raise ValueError(f"Unsupported orientation '{orientation}'. Supported: {ORIENTATION_HORIZONTAL}, {ORIENTATION_VERTICAL}")


def straightness(img: np.ndarray, orientation: str = ORIENTATION_HORIZONTAL, mask: Optional[np.ndarray] = None) -> float:
    """Mean per-row (horizontal) or per-column (vertical) intensity variance.

    Perfect stripes along ``orientation`` score 0. With a mask, only lines with
    at least two valid pixels count; ``nan`` if there are none.
    """
    gray, valid = _oriented(img, orientation, mask)
    if mask is None:
        return float(np.mean(np.var(gray, axis=1)))
    counts = valid.sum(axis=1)
    usable = counts >= 2
    if not usable.any():
        return float("nan")
    weights = valid[usable].astype(np.float64)
    lines = gray[usable]
    means = (lines * weights).sum(axis=1) / counts[usable]
    variances = (weights * (lines - means[:, None]) ** 2).sum(axis=1) / counts[usable]
    return float(np.mean(variances))


def _masked_variance(img: np.ndarray, mask: Optional[np.ndarray]) -> float:
    gray = _gray(img)
    values = gray if mask is None else gray[np.asarray(mask, dtype=bool)]
    return float(np.var(values)) if values.size >= 2 else 0.0


def normalized_straightness(img: np.ndarray, orientation: str, mask: Optional[np.ndarray] = None) -> float:
    """Straightness divided by the total intensity variance; in [0, 1]."""
    total = _masked_variance(img, mask)
    if total < MIN_STRUCTURE_VARIANCE:
        return float("nan")
    return straightness(img, orientation, mask) / total


def spectral_peak_score(img: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """Share of non-DC spectral power held by the strongest frequency bin."""
    gray = _gray(img)
    if mask is not None:
        valid = np.asarray(mask, dtype=bool)
        if not valid.any():
            return 0.0
        gray = np.where(valid, gray, gray[valid].mean())
    power = np.abs(np.fft.fft2(gray - gray.mean())) ** 2
    power[0, 0] = 0.0
    total = float(power.sum())
    return float(power.max() / total) if total > 0 else 0.0


def psnr(a: np.ndarray, b: np.ndarray, mask: Optional[np.ndarray] = None, peak: float = 1.0) -> float:
    first, second = as_image(a), as_image(b)
    if first.shape != second.shape:
        raise ValueError(f"image shapes differ: {first.shape} vs {second.shape}")
    diff = (first - second) ** 2
    if mask is not None:
        diff = diff[np.asarray(mask, dtype=bool)]
    if diff.size == 0:
        raise ValueError("psnr needs at least one covered pixel")
    mse = float(np.mean(diff))
    return float("inf") if mse == 0 else 10.0 * math.log10(peak * peak / mse)


def _correlation(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    norm = math.sqrt(float(np.sum(a * a)) * float(np.sum(b * b)))
    return float(np.sum(a * b)) / norm if norm > 0 else float("nan")


def template_mismatch(
    img: np.ndarray,
    spec: PatternSpec,
    mask: Optional[np.ndarray] = None,
    *,
    search_phase: bool = False,
) -> float:
    """``1 - r`` for the Pearson correlation of ``img`` with ``spec`` rendered in the same frame.

    Correlation ignores the palette. With ``search_phase`` the pattern phase is
    fitted (grid, then bounded refinement) instead of taken from ``spec``.
    ``nan`` when the covered region is flat.
    """
    gray = _gray(img)
    height, width = gray.shape
    if height != width:
        raise ValueError(f"template_mismatch needs a square image, got {height}x{width}")
    valid = np.ones_like(gray, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if np.count_nonzero(valid) < 2:
        return float("nan")
    values = gray[valid]

    def mismatch(phase: float) -> float:
        template = render_pattern(replace(spec, phase=float(phase)), width)[..., 0]
        r = _correlation(values, template[valid])
        return math.inf if math.isnan(r) else 1.0 - r

    if not search_phase:
        value = mismatch(spec.phase)
        return value if math.isfinite(value) else float("nan")
    step = 2.0 * math.pi / PHASE_SEARCH_STEPS
    phases = step * np.arange(PHASE_SEARCH_STEPS)
    coarse = [mismatch(phase) for phase in phases]
    start = float(phases[int(np.argmin(coarse))])
    refined = minimize_scalar(mismatch, bounds=(start - step, start + step), method="bounded", options={"xatol": PHASE_SEARCH_XTOL})
    value = min(float(refined.fun), min(coarse))
    return value if math.isfinite(value) else float("nan")


def content_centroid(img: np.ndarray, mask: Optional[np.ndarray] = None) -> tuple[float, float]:
    """Intensity centre of mass ``(x, y)`` in [0, 1] image units."""
    gray = _gray(img)
    weights = gray if mask is None else np.where(np.asarray(mask, dtype=bool), gray, 0.0)
    total = float(weights.sum())
    if total <= 0:
        raise ValueError("content_centroid needs positive total intensity")
    height, width = gray.shape
    ys, xs = np.mgrid[0:height, 0:width]
    return float((weights * (xs + 0.5)).sum() / total / width), float((weights * (ys + 0.5)).sum() / total / height)


@dataclass
class DisplacementEstimate:
    k1: float
    displacement: DisplacementField
    score: float
    reliable: bool


def _regularity_cost(
    family: str, spec: Optional[PatternSpec], search_phase: bool
) -> Callable[[np.ndarray, np.ndarray], float]:
    orientation = STRIPE_ORIENTATION.get(family)
    if orientation is not None:
        return lambda image, covered: normalized_straightness(image, orientation, covered)
    if spec is not None and family != FAMILY_GRADIENT:
        return lambda image, covered: template_mismatch(image, spec, covered, search_phase=search_phase)
    return lambda image, covered: -spectral_peak_score(image, covered)


def estimate_displacement(
    img: np.ndarray,
    family: str,
    *,
    mask: Optional[np.ndarray] = None,
    res: Optional[int] = None,
    k1_range: tuple[float, float] = K1_SEARCH_RANGE,
    threads: int = 1,
    spec: Optional[PatternSpec] = None,
    search_phase: bool = False,
) -> DisplacementEstimate:
    """Recover a fisheye ``k1`` by searching for the unwarp that best restores the pattern.

    Coarse-to-fine grid search over ``k1_range``. Stripes are scored by
    normalized straightness. Checker, rings and dots are scored against
    ``spec`` rendered at its frequency (see ``template_mismatch``); without a
    spec they fall back to the negated spectral peak, which does not pin
    ``k1`` down, and the estimate is never reliable.
    """
    if spec is not None and spec.family != family:
        raise ValueError(f"spec family '{spec.family}' does not match '{family}'")
    image = as_image(img)
    height, width = image.shape[:2]
    cost = _regularity_cost(family, spec, search_phase)
    low, high = k1_range

    def evaluate(k1: float) -> float:
        field = warp_field_from_lens(fisheye(k1), height, width)
        rectified, covered = unwarp(image, field, (height, width), mask=mask)
        if covered.mean() < MIN_SEARCH_COVERAGE:
            return math.inf
        value = cost(rectified, covered)
        return math.inf if math.isnan(value) else value

    best_k1, best_cost = 0.0, math.inf
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        center, half_width = (low + high) / 2.0, (high - low) / 2.0
        for step in K1_SEARCH_STEPS:
            count = int(round(2.0 * half_width / step))
            candidates = np.clip(center - half_width + step * np.arange(count + 1), low, high)
            candidates = np.unique(np.round(candidates, 9))
            costs = list(pool.map(evaluate, candidates))
            index = int(np.argmin(costs))
            if costs[index] < best_cost:
                best_k1, best_cost = float(candidates[index]), float(costs[index])
            center, half_width = best_k1, step
    field = warp_field_from_lens(fisheye(best_k1), height, width)
    structured = _masked_variance(image, mask) >= MIN_STRUCTURE_VARIANCE
    if family in STRIPE_ORIENTATION:
        reliable = structured and best_cost <= RELIABLE_STRAIGHTNESS
    elif spec is not None and family != FAMILY_GRADIENT:
        reliable = structured and best_cost <= RELIABLE_TEMPLATE_MISMATCH
    else:
        reliable = False
    logger.debug("estimate_displacement %s: k1=%.4f cost=%.4g reliable=%s", family, best_k1, best_cost, reliable)
    return DisplacementEstimate(best_k1, conditioning_displacement(field, res), best_cost, bool(reliable))


@dataclass(frozen=True)
class EvalRecord:
    name: str
    value: float
    tolerance: str
    passed: bool

    def line(self) -> str:
        return f"{self.name} {self.value:.6g} {self.tolerance} {'PASS' if self.passed else 'FAIL'}"


def format_report(records: Sequence[EvalRecord]) -> str:
    """One ``name value tolerance PASS|FAIL`` line per record."""
    return "".join(record.line() + "\n" for record in records)


@dataclass(frozen=True)
class FidelityRow:
    k1: float
    spec: PatternSpec
    seed: int
    recovered_k1: float
    control_error: float
    generated_error: Optional[float]
    displacement: Optional[DisplacementField] = None


ImageGenerator = Callable[[PatternSpec, WarpField, int], np.ndarray]


def distorted_control(spec: PatternSpec, field: WarpField) -> tuple[np.ndarray, np.ndarray]:
    """The manually distorted image: the pattern remapped through ``field``."""
    return remap(render_pattern(spec, field.width), field)


def run_fidelity_study(
    specs: Sequence[PatternSpec],
    seeds: Sequence[int],
    res: int,
    *,
    k1_levels: Sequence[float] = FIDELITY_K1_LEVELS,
    generate: Optional[ImageGenerator] = None,
    threads: int = 1,
) -> list[FidelityRow]:
    """Distort each spec at every ``k1`` level, then measure it with the oracle.

    Seeds jitter the pattern phase for the control; when ``generate`` is given
    its output for the same field is measured too.
    """
    rows = []
    for k1 in k1_levels:
        field = warp_field_from_lens(fisheye(k1), res, res)
        truth = conditioning_displacement(field, res)
        for spec in specs:
            for seed in seeds:
                phase = float(np.random.default_rng([seed, spec.class_id]).uniform(0.0, 2.0 * math.pi))
                jittered = PatternSpec(spec.family, spec.frequency, phase, spec.palette_seed)
                control, covered = distorted_control(jittered, field)
                estimate = estimate_displacement(
                    control, spec.family, mask=covered, res=res, threads=threads, spec=jittered
                )
                generated_error = None
                if generate is not None:
                    generated = generate(jittered, field, seed)
                    measured = estimate_displacement(
                        generated, spec.family, res=res, threads=threads, spec=jittered, search_phase=True
                    )
                    generated_error = displacement_error(measured.displacement, truth)
                rows.append(
                    FidelityRow(
                        k1=float(k1),
                        spec=jittered,
                        seed=int(seed),
                        recovered_k1=estimate.k1,
                        control_error=displacement_error(estimate.displacement, truth),
                        generated_error=generated_error,
                        displacement=estimate.displacement,
                    )
                )
                logger.info("fidelity k1=%g %s seed=%d recovered=%.3f", k1, spec.family, seed, estimate.k1)
    return rows


def summarize_fidelity(rows: Sequence[FidelityRow], prefix: str = "fidelity") -> list[EvalRecord]:
    """Per-level records: mean relative k1 error and generated-vs-control displacement error."""
    records = []
    for k1 in sorted({row.k1 for row in rows}):
        level = [row for row in rows if row.k1 == k1]
        rel_error = float(np.mean([abs(row.recovered_k1 - k1) / abs(k1) for row in level]))
        records.append(EvalRecord(f"{prefix}.k1_{k1:g}.k1_rel_error", rel_error, f"<={K1_TOLERANCE:g}", rel_error <= K1_TOLERANCE))
        control = float(np.mean([row.control_error for row in level]))
        records.append(EvalRecord(f"{prefix}.k1_{k1:g}.control_error_px", control, "info", True))
        generated = [row.generated_error for row in level if row.generated_error is not None]
        if generated:
            value = float(np.mean(generated))
            bound = CONTROL_ERROR_FACTOR * max(control, 1.0)
            records.append(EvalRecord(f"{prefix}.k1_{k1:g}.generated_error_px", value, f"<={bound:.3g}", value <= bound))
    return records
