"""Brown-Conrady lens model, lens warp fields and the random distortion sampler."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Final, Optional

import numpy as np

from grid import NormalizedPoint, WarpField, normalized_grid

BRANCH_NONE: Final = "none"
BRANCH_POSITIVE: Final = "positive"
BRANCH_NEGATIVE: Final = "negative"

RECORD_KEYS: Final = ("k1", "k2", "p1", "p2", "cx", "cy", "focal_scale")

FIDELITY_K1_LEVELS: Final = (10.0, 15.0, 20.0, 25.0)


@dataclass(frozen=True)
class LensParams:
    """Radial (k1, k2) and tangential (p1, p2) coefficients about a focal center."""

    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    cx: float = 0.5
    cy: float = 0.5
    focal_scale: float = 1.0

    def __post_init__(self) -> None:
        for item in fields(self):
            value = getattr(self, item.name)
            if not np.isfinite(value):
                raise ValueError(f"LensParams.{item.name} must be finite, got {value}")
        if self.focal_scale <= 0:
            raise ValueError(f"LensParams.focal_scale must be > 0, got {self.focal_scale}")

    @property
    def is_identity(self) -> bool:
        return self.k1 == 0 and self.k2 == 0 and self.p1 == 0 and self.p2 == 0

    def to_record(self) -> str:
        """Flat ``key=value`` text, one coefficient per line."""
        values = asdict(self)
        return "".join(f"{key}={values[key]!r}\n" for key in RECORD_KEYS)

    @classmethod
    def from_record(cls, text: str) -> LensParams:
        values: dict[str, float] = {}
        for line_number, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or key not in RECORD_KEYS:
                raise ValueError(f"Unknown lens record field '{key}' on line {line_number}")
            try:
                values[key] = float(value)
            except ValueError:
                raise ValueError(f"Lens record field '{key}' is not a decimal float: '{value.strip()}'") from None
        return cls(**values)


NO_DISTORTION: Final = LensParams()


def fisheye(k1: float) -> LensParams:
    """Pure radial lens with only ``k1`` set, as used by the fidelity sweep."""
    return LensParams(k1=float(k1))


LENS_PRESETS: Final = {
    "convex": LensParams(k1=20.0, k2=6.0),
    "concave": LensParams(k1=-0.4, k2=-0.24),
    "fisheye": fisheye(10.0),
    "wide": LensParams(k1=2.0, focal_scale=1.6),
}


def distort_coords(u: np.ndarray, v: np.ndarray, lens: LensParams) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized Brown-Conrady map over normalized coordinates."""
    f = lens.focal_scale
    x = (np.asarray(u, dtype=np.float64) - lens.cx) / f
    y = (np.asarray(v, dtype=np.float64) - lens.cy) / f
    r2 = x * x + y * y
    radial = 1.0 + lens.k1 * r2 + lens.k2 * r2 * r2
    xd = x * radial + 2.0 * lens.p1 * x * y + lens.p2 * (r2 + 2.0 * x * x)
    yd = y * radial + lens.p1 * (r2 + 2.0 * y * y) + 2.0 * lens.p2 * x * y
    return lens.cx + f * xd, lens.cy + f * yd


def distort_point(point: NormalizedPoint, lens: LensParams) -> NormalizedPoint:
    u, v = distort_coords(np.float64(point.u), np.float64(point.v), lens)
    return NormalizedPoint(float(u), float(v))


def warp_field_from_lens(lens: LensParams, height: int, width: int) -> WarpField:
    """Backward (sampling) map: each output pixel's source coordinate."""
    base = normalized_grid(height, width)
    if lens.is_identity:
        return base
    u, v = distort_coords(base.u, base.v, lens)
    return WarpField(np.stack([u, v], axis=-1))


@dataclass(frozen=True)
class WarpSchedule:
    """Two-stage distortion distribution: mild warps first, aggressive at the end."""

    mild_fraction: float = 0.8
    mild_scale: tuple[float, float] = (0.0, 4.0)
    aggressive_scale: tuple[float, float] = (4.0, 10.0)
    no_distortion_prob: float = 0.3
    positive_k1: tuple[float, float] = (0.0, 5.0)
    positive_k2: tuple[float, float] = (0.0, 1.5)
    positive_p: tuple[float, float] = (0.0, 0.05)
    negative_k1: tuple[float, float] = (-0.1, -0.05)
    negative_k2: tuple[float, float] = (-0.06, -0.01)
    negative_p: tuple[float, float] = (0.0, 0.00035)
    focal_box: float = 0.3

    def __post_init__(self) -> None:
        for name in ("mild_fraction", "no_distortion_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"WarpSchedule.{name} must be in [0, 1], got {value}")

    def scale_range(self, progress: float) -> tuple[float, float]:
        return self.mild_scale if progress < self.mild_fraction else self.aggressive_scale


DEFAULT_SCHEDULE: Final = WarpSchedule()


@dataclass(frozen=True)
class LensDraw:
    """One sampler draw with the hidden global scale and sign branch."""

    params: LensParams
    scale: Optional[float]
    branch: str


def sample_lens_draw(
    rng: np.random.Generator,
    progress: float,
    schedule: WarpSchedule = DEFAULT_SCHEDULE,
) -> LensDraw:
    """Draw lens parameters for a training sample at the given training progress."""
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress must be in [0, 1], got {progress}")
    if rng.random() < schedule.no_distortion_prob:
        return LensDraw(NO_DISTORTION, None, BRANCH_NONE)

    positive = rng.random() < 0.5
    if positive:
        k1_range, k2_range, p_range = schedule.positive_k1, schedule.positive_k2, schedule.positive_p
    else:
        k1_range, k2_range, p_range = schedule.negative_k1, schedule.negative_k2, schedule.negative_p

    scale = float(rng.uniform(*schedule.scale_range(progress)))
    half_box = schedule.focal_box / 2.0
    params = LensParams(
        k1=float(rng.uniform(*k1_range)) * scale,
        k2=float(rng.uniform(*k2_range)) * scale,
        p1=float(rng.uniform(*p_range)) * scale,
        p2=float(rng.uniform(*p_range)) * scale,
        cx=0.5 + float(rng.uniform(-half_box, half_box)),
        cy=0.5 + float(rng.uniform(-half_box, half_box)),
    )
    return LensDraw(params, scale, BRANCH_POSITIVE if positive else BRANCH_NEGATIVE)


def sample_lens_params(
    rng: np.random.Generator,
    progress: float,
    schedule: WarpSchedule = DEFAULT_SCHEDULE,
) -> LensParams:
    return sample_lens_draw(rng, progress, schedule).params

