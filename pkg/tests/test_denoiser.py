"""Tests for conditioning packs, the diffusion schedule, the model and checkpoints."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy import stats

from denoiser import (
    MODE_METRIC,
    CheckpointFormatError,
    ConditioningPack,
    DenoiserConfig,
    DenoiserModel,
    DiffusionSchedule,
    add_noise,
    attention_shapes,
    collate_batch,
    downsample_log_density,
    load_checkpoint,
    metric_pack,
    positional_pack,
    sample,
    save_checkpoint,
    sphere_metric_conditioning,
    sphere_positional_pack,
    train_step,
)
from differential import DensityMap
from grid import normalized_grid
from lens import fisheye, warp_field_from_lens
from selftest import check_zero_init_parity
from sphere import seam_columns, seam_discrepancy, sphere_positional_field


def _pack(size: int, k1: float = 0.0) -> ConditioningPack:
    field = warp_field_from_lens(fisheye(k1), size, size)
    return positional_pack(field, attention_shapes(size, size))


def test_attention_shapes():
    assert attention_shapes(64, 128) == ((32, 64), (16, 32))
    with pytest.raises(ValueError, match="divisible by 4"):
        attention_shapes(10, 12)


def test_log_density_pooling():
    pooled = downsample_log_density(DensityMap(np.array([[1.0, 1.0], [1.0, 3.0]])), [1])
    assert pooled[0].shape == (1, 1)
    assert pooled[0][0, 0] == pytest.approx(math.log(1.5))

    uniform = downsample_log_density(DensityMap(np.ones((8, 8))), [(4, 4), (2, 2)])
    assert all(np.all(level == 0.0) for level in uniform)


def test_pooling_rejects_uneven_shapes():
    with pytest.raises(ValueError, match="cannot be pooled"):
        downsample_log_density(DensityMap(np.ones((6, 6))), [4])


def test_pack_validation_and_variants():
    pack = _pack(16, 3.0)
    assert pack.channels.shape == (16, 16, 2)
    assert [level.shape for level in pack.log_density_pyramid] == [(8, 8), (4, 4)]
    assert any(np.any(level != 0.0) for level in pack.log_density_pyramid)

    plain = pack.without_reweighting()
    assert all(np.all(level == 0.0) for level in plain.log_density_pyramid)
    assert np.array_equal(plain.channels, pack.channels)
    assert np.all(pack.with_zero_channels().channels == 0.0)

    with pytest.raises(ValueError, match=r"needs shape \(H, W, 4\)"):
        ConditioningPack(MODE_METRIC, np.zeros((4, 4, 2)), ())
    with pytest.raises(ValueError, match="Unsupported conditioning mode"):
        ConditioningPack("polar", np.zeros((4, 4, 2)), ())


def test_metric_pack_ablations():
    field = normalized_grid(8, 8)
    shapes = attention_shapes(8, 8)
    full = metric_pack(field, shapes)
    assert full.channels.shape == (8, 8, 4)
    assert np.any(full.channels[..., 3] != 0.0)
    assert np.all(metric_pack(field, shapes, zero_distance=True).channels[..., 3] == 0.0)

    trivial = metric_pack(warp_field_from_lens(fisheye(2.0), 8, 8), shapes, trivial_metric=True).channels
    assert np.all(trivial[..., :2] == 1.0) and np.all(trivial[..., 2:] == 0.0)


def test_sphere_packs():
    pack = sphere_positional_pack(8, 16)
    assert pack.channels.shape == (8, 16, 2)
    assert pack.channels[4, 8, 1] == pytest.approx(math.pi / 2)
    assert np.array_equal(pack.channels, sphere_positional_field(8, 16).coords)
    assert sphere_positional_pack(8, 16, scale=0.5).channels[4, 8, 1] == pytest.approx(math.pi / 4)
    assert [level.shape for level in pack.log_density_pyramid] == [(4, 8), (2, 4)]
    assert sphere_metric_conditioning(8, 16).channels.shape == (8, 16, 4)


def test_cosine_schedule_shape():
    schedule = DiffusionSchedule()
    alpha_bars = schedule.alpha_bars()

    assert alpha_bars.shape == (200,)
    assert np.all(np.diff(alpha_bars) < 0)
    assert alpha_bars[0] > 0.999
    assert alpha_bars[-1] < 1e-4
    steps = schedule.respaced(50)
    assert len(steps) == 50 and steps[0] == 0 and steps[-1] == 199
    with pytest.raises(ValueError, match="sampling steps"):
        schedule.respaced(0)


def test_add_noise_at_first_step_stays_close():
    schedule = DiffusionSchedule()
    x0 = torch.linspace(-1.0, 1.0, 1000)
    xt, eps = add_noise(x0, 0, schedule, torch.Generator().manual_seed(0))
    bound = math.sqrt(1.0 - schedule.alpha_bars()[0])

    assert torch.max(torch.abs(xt - x0)).item() <= 6.0 * bound
    assert eps.shape == x0.shape


def test_add_noise_at_last_step_is_standard_normal():
    schedule = DiffusionSchedule()
    x0 = torch.ones(4096, dtype=torch.float64)
    xt, _ = add_noise(x0, schedule.steps - 1, schedule, torch.Generator().manual_seed(1))

    assert stats.kstest(xt.numpy(), "norm").pvalue > 0.001


@pytest.mark.parametrize("t", [20, 100, 180])
def test_add_noise_variance_follows_the_schedule(t):
    schedule = DiffusionSchedule()
    x0 = 0.2 + 0.5 * torch.randn(10_000, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
    xt, _ = add_noise(x0, t, schedule, torch.Generator().manual_seed(4))

    alpha_bar = float(schedule.alpha_bars()[t])
    expected = alpha_bar * float(x0.var()) + (1.0 - alpha_bar)
    assert float(xt.var()) == pytest.approx(expected, rel=0.05)


def test_add_noise_rejects_bad_timestep():
    with pytest.raises(ValueError, match="timestep"):
        add_noise(torch.zeros(3), 200, DiffusionSchedule())


def test_config_validation_and_dict_round_trip(tiny_config):
    assert DenoiserConfig.from_dict(tiny_config.to_dict()) == tiny_config
    with pytest.raises(ValueError, match="Unknown denoiser config"):
        DenoiserConfig.from_dict({"depth": 3})
    with pytest.raises(ValueError, match="Unsupported cond_mode"):
        DenoiserConfig(cond_mode="polar")
    with pytest.raises(ValueError, match="num_heads 3"):
        DenoiserConfig(base_channels=8, num_heads=3)


def test_untrained_model_predicts_zero(tiny_config):
    torch.manual_seed(0)
    model = DenoiserModel(tiny_config)
    batch = collate_batch([np.full((16, 16, 1), 0.5)] * 2, [0, 3], [_pack(16, 2.0)] * 2)
    out = model(batch.images, torch.tensor([5, 150]), batch.class_ids, batch.cond, batch.log_density)

    assert out.shape == (2, 1, 16, 16)
    assert torch.all(out == 0.0)


def test_model_rejects_mismatched_conditioning(tiny_config):
    model = DenoiserModel(tiny_config)
    x = torch.zeros(1, 1, 16, 16)
    with pytest.raises(ValueError, match="does not fit model"):
        model(x, torch.tensor([1]), torch.tensor([0]), torch.zeros(1, 4, 16, 16), [None, None])


def test_conditioning_is_ignored_at_initialization():
    record = check_zero_init_parity(seed=3)[0]
    assert record.passed


def test_collate_batch_scales_images_and_checks_sizes():
    batch = collate_batch([np.ones((8, 8, 1)), np.zeros((8, 8, 1))], [1, 2], [_pack(8), _pack(8)])
    assert batch.images.shape == (2, 1, 8, 8)
    assert batch.images[0].max().item() == 1.0 and batch.images[1].min().item() == -1.0
    assert [level.shape for level in batch.log_density] == [(2, 16), (2, 4)]

    with pytest.raises(ValueError, match="differ in size"):
        collate_batch([np.ones((4, 4, 1))], [0], [_pack(8)])


def test_train_step_starts_near_unit_loss(tiny_config):
    torch.manual_seed(0)
    model = DenoiserModel(tiny_config)
    optimizer = torch.optim.Adam(model.parameters(), lr=1e-3)
    rng = np.random.default_rng(0)
    images = [rng.uniform(size=(32, 32, 1)) for _ in range(8)]
    batch = collate_batch(images, list(range(6)) + [0, 1], [_pack(32, 1.0)] * 8)

    loss = train_step(model, optimizer, batch, DiffusionSchedule(), torch.Generator().manual_seed(0))
    assert abs(loss - 1.0) < 0.1


def test_sample_is_deterministic_and_in_range(tiny_config):
    torch.manual_seed(0)
    model = DenoiserModel(tiny_config)
    pack = _pack(16, 2.0)

    first = sample(model, pack, 1, steps=4, generator=torch.Generator().manual_seed(7))
    second = sample(model, pack, 1, steps=4, generator=torch.Generator().manual_seed(7))

    assert first.shape == (16, 16, 1)
    assert np.array_equal(first, second)
    assert first.min() >= 0.0 and first.max() <= 1.0


def test_sample_with_seam_matches_border_strips(tiny_config):
    torch.manual_seed(0)
    model = DenoiserModel(tiny_config)
    pack = sphere_positional_pack(8, 32)
    image = sample(model, pack, 0, steps=3, generator=torch.Generator().manual_seed(0), seam_fraction=0.1)
    count = seam_columns(32, 0.1)

    assert np.array_equal(image[:, -count:], image[:, :count])
    assert seam_discrepancy(image[..., 0]) == pytest.approx(np.mean(np.abs(image[:, count - 1, 0] - image[:, 0, 0])))


def test_checkpoint_round_trip(tmp_path: Path, tiny_config):
    torch.manual_seed(0)
    model = DenoiserModel(tiny_config)
    with torch.no_grad():
        model.out_conv.weight.normal_()
    schedule = DiffusionSchedule(steps=50)
    path = save_checkpoint(tmp_path / "model.cdm", model, schedule)

    loaded, loaded_schedule = load_checkpoint(path)
    assert loaded.config == tiny_config
    assert loaded_schedule == schedule
    for name, tensor in model.state_dict().items():
        assert torch.equal(loaded.state_dict()[name], tensor), name
    assert path.read_bytes()[:4] == b"CDM1"


def test_checkpoint_errors(tmp_path: Path, tiny_config):
    path = save_checkpoint(tmp_path / "model.cdm", DenoiserModel(tiny_config))
    blob = path.read_bytes()

    (tmp_path / "magic.cdm").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointFormatError, match="magic"):
        load_checkpoint(tmp_path / "magic.cdm")

    (tmp_path / "short.cdm").write_bytes(blob[:-8])
    with pytest.raises(CheckpointFormatError, match="truncated"):
        load_checkpoint(tmp_path / "short.cdm")

    (tmp_path / "long.cdm").write_bytes(blob + b"\0" * 4)
    with pytest.raises(CheckpointFormatError, match="trailing"):
        load_checkpoint(tmp_path / "long.cdm")
