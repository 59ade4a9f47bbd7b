"""Tests for FieldFile and PNG exchange."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from differential import density, pullback_metric
from field_io import (
    FieldFile,
    FieldFormatError,
    density_from_file,
    density_to_file,
    metric_from_file,
    metric_to_file,
    read_field_file,
    read_png,
    warp_from_file,
    warp_to_file,
    write_field_file,
    write_png,
)
from grid import WarpField, normalized_grid
from lens import LensParams, warp_field_from_lens


def test_header_layout_and_payload_size():
    blob = FieldFile(np.zeros((3, 5, 2))).to_bytes()

    assert blob.startswith(b"CFD1 3 5 2\n")
    assert len(blob) == len(b"CFD1 3 5 2\n") + 3 * 5 * 2 * 4


def test_payload_is_little_endian_row_major():
    data = np.arange(12, dtype=np.float32).reshape(2, 3, 2)
    payload = FieldFile(data).to_bytes().split(b"\n", 1)[1]
    assert payload == data.astype("<f4").tobytes()


def test_write_read_is_bit_identical(tmp_path: Path, rng):
    original = FieldFile(rng.standard_normal((4, 6, 4)))
    path = write_field_file(tmp_path / "nested" / "metric.cfd", original)

    assert read_field_file(path).to_bytes() == original.to_bytes()


@pytest.mark.parametrize(
    ("blob", "field_name"),
    [
        (b"no newline here", "header"),
        (b"CFD2 1 1 1\n" + b"\0" * 4, "magic"),
        (b"CFD1 x 1 1\n" + b"\0" * 4, "height"),
        (b"CFD1 1 0 1\n", "width"),
        (b"CFD1 1 1 2\n" + b"\0" * 4, "payload"),
        (b"CFD1 1 1\n", "header"),
    ],
)
def test_malformed_files_name_the_field(blob: bytes, field_name: str):
    with pytest.raises(FieldFormatError, match=field_name):
        FieldFile.from_bytes(blob)


def test_warp_round_trip_keeps_invalid_pixels():
    field = warp_field_from_lens(LensParams(k1=0.3), 6, 8)
    valid = np.ones((6, 8), dtype=bool)
    valid[0, :3] = False
    again = warp_from_file(FieldFile.from_bytes(warp_to_file(field.with_valid(valid)).to_bytes()))

    assert np.array_equal(again.valid, valid)
    assert np.allclose(again.coords[valid], field.coords[valid], atol=1e-6)


def test_kind_specific_readers_check_channels():
    base = normalized_grid(5, 5)
    assert np.allclose(density_from_file(density_to_file(density(base))).values, 1.0, atol=1e-6)
    metric = metric_from_file(metric_to_file(pullback_metric(base)))
    assert np.allclose(metric.g11, 1.0, atol=1e-6)

    with pytest.raises(FieldFormatError, match="warp needs 2"):
        warp_from_file(metric_to_file(pullback_metric(base)))


def test_png_round_trip(tmp_path: Path):
    image = np.linspace(0.0, 1.0, 16).reshape(4, 4, 1)
    path = write_png(tmp_path / "img.png", image)
    loaded = read_png(path)

    assert loaded.shape == (4, 4, 1)
    assert np.max(np.abs(loaded - image)) <= 0.5 / 255 + 1e-12


def test_png_rgb_round_trip(tmp_path: Path, rng):
    image = np.rint(rng.uniform(size=(3, 5, 3)) * 255) / 255
    loaded = read_png(write_png(tmp_path / "rgb.png", image))
    assert np.allclose(loaded, image)


def test_field_file_rejects_bad_shape():
    with pytest.raises(FieldFormatError):
        FieldFile(np.zeros(5))


def test_all_invalid_warp_field_survives(tmp_path: Path):
    field = WarpField(np.zeros((3, 3, 2)), np.zeros((3, 3), dtype=bool))
    path = write_field_file(tmp_path / "empty.cfd", warp_to_file(field))
    assert not warp_from_file(read_field_file(path)).valid.any()
