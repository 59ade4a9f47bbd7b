"""Procedural training corpus with analytically known geometry."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Final, Optional, Sequence

import numpy as np

from denoiser import MODE_POSITIONAL, ConditioningPack, attention_shapes, build_pack
from field_io import FieldFile, read_field_file, write_field_file, write_png
from grid import WarpField
from lens import DEFAULT_SCHEDULE, LensDraw, LensParams, WarpSchedule, sample_lens_draw
from resample import plan_crop, random_crop, warp_then_crop

logger = logging.getLogger(__name__)

FAMILY_STRIPES_H: Final = "stripes-h"
FAMILY_STRIPES_V: Final = "stripes-v"
FAMILY_CHECKER: Final = "checker"
FAMILY_RINGS: Final = "rings"
FAMILY_DOTS: Final = "dots"
FAMILY_GRADIENT: Final = "gradient"

# Position in this tuple is the class id.
FAMILIES: Final = (
    FAMILY_STRIPES_H,
    FAMILY_STRIPES_V,
    FAMILY_CHECKER,
    FAMILY_RINGS,
    FAMILY_DOTS,
    FAMILY_GRADIENT,
)
STRIPE_FAMILIES: Final = frozenset({FAMILY_STRIPES_H, FAMILY_STRIPES_V})

FREQUENCY_RANGE: Final = (2.0, 16.0)
TRAINING_FREQUENCY_RANGE: Final = (2.0, 8.0)
DOT_SIGMA: Final = 0.15

SAMPLE_IMAGE_FILE: Final = "image.cfd"
SAMPLE_PREVIEW_FILE: Final = "image.png"
SAMPLE_FIELD_FILE: Final = "field.cfd"
SAMPLE_COVERAGE_FILE: Final = "coverage.cfd"
SAMPLE_META_FILE: Final = "meta.json"


@dataclass(frozen=True)
class PatternSpec:
    """A procedural pattern: family, frequency in cycles per unit, phase and palette."""

    family: str
    frequency: float = 4.0
    phase: float = 0.0
    palette_seed: int = 0

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"Unsupported pattern family '{self.family}'. Supported: {', '.join(FAMILIES)}")
        low, high = FREQUENCY_RANGE
        if not low <= self.frequency <= high:
            raise ValueError(f"frequency must be in [{low:g}, {high:g}], got {self.frequency}")
        if not math.isfinite(self.phase):
            raise ValueError(f"phase must be finite, got {self.phase}")
        if self.palette_seed < 0:
            raise ValueError(f"palette_seed must be >= 0, got {self.palette_seed}")

    @property
    def class_id(self) -> int:
        return FAMILIES.index(self.family)

    def palette(self) -> tuple[float, float]:
        """``(low, high)`` intensities; seed 0 is black on white."""
        if self.palette_seed == 0:
            return 0.0, 1.0
        rng = np.random.default_rng(self.palette_seed)
        return float(rng.uniform(0.0, 0.3)), float(rng.uniform(0.7, 1.0))


def family_for_class(class_id: int) -> str:
    if not 0 <= class_id < len(FAMILIES):
        raise ValueError(f"class id must be in [0, {len(FAMILIES) - 1}], got {class_id}")
    return FAMILIES[class_id]


def _profile(spec: PatternSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    f = spec.frequency
    tau = 2.0 * math.pi
    if spec.family == FAMILY_STRIPES_H:
        return 0.5 + 0.5 * np.cos(tau * f * y + spec.phase)
    if spec.family == FAMILY_STRIPES_V:
        return 0.5 + 0.5 * np.cos(tau * f * x + spec.phase)
    offset = spec.phase / (tau * f)
    if spec.family == FAMILY_CHECKER:
        cells = np.floor(2.0 * f * (x + offset)) + np.floor(2.0 * f * (y + offset))
        return np.mod(cells, 2.0)
    if spec.family == FAMILY_RINGS:
        return 0.5 + 0.5 * np.cos(tau * f * np.hypot(x - 0.5, y - 0.5) + spec.phase)
    if spec.family == FAMILY_DOTS:
        fx = np.mod(f * (x + offset), 1.0) - 0.5
        fy = np.mod(f * (y + offset), 1.0) - 0.5
        return np.exp(-(fx * fx + fy * fy) / (2.0 * DOT_SIGMA * DOT_SIGMA))
    # gradient: a linear ramp whose direction is the phase angle
    ramp = 0.5 + (x - 0.5) * math.cos(spec.phase) + (y - 0.5) * math.sin(spec.phase)
    return np.clip(ramp, 0.0, 1.0)


def render_pattern(spec: PatternSpec, resolution: int) -> np.ndarray:
    """Evaluate the pattern at pixel centers of a square ``(res, res, 1)`` image."""
    if resolution < 2:
        raise ValueError(f"resolution must be >= 2, got {resolution}")
    centers = (np.arange(resolution, dtype=np.float64) + 0.5) / resolution
    x, y = np.meshgrid(centers, centers)
    low, high = spec.palette()
    return (low + (high - low) * _profile(spec, x, y))[..., None]


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent generator for sample ``index`` of run ``seed``."""
    if seed < 0 or index < 0:
        raise ValueError(f"seed and index must be >= 0, got {seed}, {index}")
    return np.random.default_rng([int(seed), int(index)])


def sample_pattern_spec(
    rng: np.random.Generator,
    families: Sequence[str] = FAMILIES,
    frequency_range: tuple[float, float] = TRAINING_FREQUENCY_RANGE,
) -> PatternSpec:
    family = families[int(rng.integers(0, len(families)))]
    return PatternSpec(
        family=family,
        frequency=float(rng.uniform(*frequency_range)),
        phase=float(rng.uniform(0.0, 2.0 * math.pi)),
    )


@dataclass
class TrainingSample:
    image: np.ndarray
    class_id: int
    pack: ConditioningPack
    field: WarpField
    spec: PatternSpec
    lens: LensParams
    progress: float
    render_res: int


def make_training_sample(
    rng: np.random.Generator,
    progress: float,
    model_res: int,
    *,
    families: Sequence[str] = FAMILIES,
    mode: str = MODE_POSITIONAL,
    schedule: WarpSchedule = DEFAULT_SCHEDULE,
    lens_draw: Optional[LensDraw] = None,
) -> TrainingSample:
    """Render a pattern, distort it and crop it with its field.

    The pattern is rendered at twice ``model_res`` or finer, as fine as the
    drawn lens and crop need so that no output pixel is up-sampled. The
    conditioning pack is built from the cropped field, so image and
    coordinates always share one distortion.
    """
    spec = sample_pattern_spec(rng, families)
    draw = lens_draw or sample_lens_draw(rng, progress, schedule)
    crop, render_res = plan_crop(draw.params, random_crop(rng), model_res)
    source = render_pattern(spec, render_res)
    image, field = warp_then_crop(source, draw.params, crop.box(render_res, model_res), model_res)
    pack = build_pack(field, mode, attention_shapes(model_res, model_res))
    logger.debug("sample %s k1=%.4g covered=%.3f", spec.family, draw.params.k1, float(field.valid.mean()))
    return TrainingSample(image, spec.class_id, pack, field, spec, draw.params, float(progress), render_res)


def save_sample(directory: str | Path, sample: TrainingSample) -> Path:
    """Cache a sample as FieldFiles plus JSON metadata; the PNG is a preview only."""
    target = Path(directory)
    target.mkdir(parents=True, exist_ok=True)
    write_field_file(target / SAMPLE_IMAGE_FILE, FieldFile(sample.image))
    write_png(target / SAMPLE_PREVIEW_FILE, sample.image)
    write_field_file(target / SAMPLE_FIELD_FILE, FieldFile(sample.field.coords))
    write_field_file(target / SAMPLE_COVERAGE_FILE, FieldFile(sample.field.valid.astype(np.float32)))
    meta = {
        "class_id": sample.class_id,
        "mode": sample.pack.mode,
        "progress": sample.progress,
        "render_res": sample.render_res,
        "spec": asdict(sample.spec),
        "lens": sample.lens.to_record(),
    }
    (target / SAMPLE_META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    return target


def load_sample(directory: str | Path) -> TrainingSample:
    source = Path(directory)
    meta_path = source / SAMPLE_META_FILE
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"Malformed sample metadata {meta_path}: {exc}") from None
    for key in ("class_id", "mode", "progress", "render_res", "spec", "lens"):
        if key not in meta:
            raise ValueError(f"Sample metadata {meta_path} is missing '{key}'")
    image = read_field_file(source / SAMPLE_IMAGE_FILE).data.astype(np.float64)
    coords = read_field_file(source / SAMPLE_FIELD_FILE).data.astype(np.float64)
    coverage = read_field_file(source / SAMPLE_COVERAGE_FILE).data[..., 0] > 0.5
    field = WarpField(coords, coverage)
    spec = PatternSpec(**meta["spec"])
    pack = build_pack(field, meta["mode"], attention_shapes(field.height, field.width))
    return TrainingSample(
        image=image,
        class_id=int(meta["class_id"]),
        pack=pack,
        field=field,
        spec=spec,
        lens=LensParams.from_record(meta["lens"]),
        progress=float(meta["progress"]),
        render_res=int(meta["render_res"]),
    )
