"""FieldFile and PNG exchange formats.

A FieldFile is the ASCII header ``CFD1 <H> <W> <C>\\n`` followed by
``H * W * C`` little-endian float32 values, row-major and channel-interleaved.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Final

import numpy as np
from PIL import Image

from differential import DensityMap, MetricField
from grid import WarpField

logger = logging.getLogger(__name__)

FIELD_MAGIC: Final = b"CFD1"
FIELD_DTYPE: Final = np.dtype("<f4")
MAX_HEADER_BYTES: Final = 64

KIND_WARP: Final = "warp"
KIND_DENSITY: Final = "density"
KIND_METRIC: Final = "metric"
KIND_DISPLACEMENT: Final = "displacement"
CHANNELS_BY_KIND: Final = {KIND_WARP: 2, KIND_DENSITY: 1, KIND_METRIC: 4, KIND_DISPLACEMENT: 2}


class FieldFormatError(ValueError):
    """Raised when a FieldFile header or payload is malformed."""


@dataclass
class FieldFile:
    """An ``(H, W, C)`` float32 array as stored on disk."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[..., None]
        if data.ndim != 3 or min(data.shape) < 1:
            raise FieldFormatError(f"FieldFile data must have shape (H, W, C), got {np.shape(self.data)}")
        self.data = np.ascontiguousarray(data, dtype=FIELD_DTYPE)

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def channels(self) -> int:
        return int(self.data.shape[2])

    def header(self) -> bytes:
        return b"%s %d %d %d\n" % (FIELD_MAGIC, self.height, self.width, self.channels)

    def to_bytes(self) -> bytes:
        return self.header() + self.data.tobytes(order="C")

    @classmethod
    def from_bytes(cls, blob: bytes) -> FieldFile:
        newline = blob.find(b"\n", 0, MAX_HEADER_BYTES)
        if newline < 0:
            raise FieldFormatError("FieldFile header: missing newline-terminated 'CFD1 H W C' line")
        parts = blob[:newline].split()
        if len(parts) != 4:
            raise FieldFormatError(f"FieldFile header: expected 4 fields, got {len(parts)}")
        if parts[0] != FIELD_MAGIC:
            raise FieldFormatError(f"FieldFile magic: expected 'CFD1', got {parts[0]!r}")
        dims = []
        for name, raw in zip(("height", "width", "channels"), parts[1:]):
            try:
                value = int(raw)
            except ValueError:
                raise FieldFormatError(f"FieldFile {name}: not an integer: {raw!r}") from None
            if value < 1:
                raise FieldFormatError(f"FieldFile {name}: must be >= 1, got {value}")
            dims.append(value)
        height, width, channels = dims
        payload = blob[newline + 1:]
        expected = height * width * channels * FIELD_DTYPE.itemsize
        if len(payload) != expected:
            raise FieldFormatError(
                f"FieldFile payload: expected {expected} bytes for {height}x{width}x{channels}, got {len(payload)}"
            )
        data = np.frombuffer(payload, dtype=FIELD_DTYPE).reshape(height, width, channels)
        return cls(data.copy())


def write_field_file(path: str | Path, field_file: FieldFile) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(field_file.to_bytes())
    logger.debug("wrote %s (%dx%dx%d)", target, field_file.height, field_file.width, field_file.channels)
    return target


def read_field_file(path: str | Path) -> FieldFile:
    return FieldFile.from_bytes(Path(path).read_bytes())


def _require_channels(field_file: FieldFile, kind: str) -> None:
    expected = CHANNELS_BY_KIND[kind]
    if field_file.channels != expected:
        raise FieldFormatError(f"FieldFile channels: {kind} needs {expected}, got {field_file.channels}")


# Invalid warp pixels are stored as NaN so the mask survives the round trip.
def warp_to_file(field: WarpField) -> FieldFile:
    coords = field.coords.copy()
    coords[~field.valid] = np.nan
    return FieldFile(coords)


def warp_from_file(field_file: FieldFile) -> WarpField:
    _require_channels(field_file, KIND_WARP)
    coords = field_file.data.astype(np.float64)
    valid = np.all(np.isfinite(coords), axis=-1)
    coords[~valid] = 0.0
    return WarpField(coords, valid)


def density_to_file(density: DensityMap) -> FieldFile:
    return FieldFile(density.values[..., None])


def density_from_file(field_file: FieldFile) -> DensityMap:
    _require_channels(field_file, KIND_DENSITY)
    return DensityMap(field_file.data[..., 0].astype(np.float64))


def metric_to_file(metric: MetricField) -> FieldFile:
    return FieldFile(metric.stack())


def metric_from_file(field_file: FieldFile) -> MetricField:
    _require_channels(field_file, KIND_METRIC)
    return MetricField.from_stack(field_file.data.astype(np.float64))


def displacement_to_file(displacement: np.ndarray) -> FieldFile:
    return FieldFile(displacement)


def displacement_from_file(field_file: FieldFile) -> np.ndarray:
    _require_channels(field_file, KIND_DISPLACEMENT)
    return field_file.data.astype(np.float64)


def write_png(path: str | Path, image: np.ndarray) -> Path:
    """Store an ``(H, W, 1|3)`` image with values in [0, 1] as 8-bit PNG."""
    array = np.asarray(image, dtype=np.float64)
    if array.ndim == 3 and array.shape[2] == 1:
        array = array[..., 0]
    quantized = np.clip(np.rint(array * 255.0), 0, 255).astype(np.uint8)
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantized).save(target, format="PNG")
    return target


def read_png(path: str | Path) -> np.ndarray:
    """Load a PNG as an ``(H, W, 1|3)`` float64 image in [0, 1]."""
    with Image.open(Path(path)) as handle:
        mode = "L" if handle.mode in ("1", "L", "I", "I;16", "LA") else "RGB"
        array = np.asarray(handle.convert(mode), dtype=np.float64) / 255.0
    if array.ndim == 2:
        array = array[..., None]
    return array
