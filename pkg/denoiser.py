"""Conditional denoising diffusion model driven by warp conditioning.

Conditioning channels are concatenated with the noisy image at the input
layer, and every self-attention block shifts its scores by the log content
density of the matching resolution.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Final, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from attention import shifted_attention
from differential import DensityMap, density, pullback_metric
from grid import WarpField
from sphere import POSITIONAL_SCALE, seam_blend, sphere_metric_pack, sphere_positional_density, sphere_positional_field

logger = logging.getLogger(__name__)

MODE_POSITIONAL: Final = "positional"
MODE_METRIC: Final = "metric"
CONDITIONING_CHANNELS: Final = {MODE_POSITIONAL: 2, MODE_METRIC: 4}
SUPPORTED_MODES: Final = frozenset(CONDITIONING_CHANNELS)

NUM_LEVELS: Final = 3
DEFAULT_TRAIN_STEPS: Final = 200
DEFAULT_SAMPLE_STEPS: Final = 50

CHECKPOINT_MAGIC: Final = b"CDM1"
CHECKPOINT_VERSION: Final = 1
CHECKPOINT_DTYPE: Final = np.dtype("<f4")

Shape = Union[int, tuple[int, int]]


class CheckpointFormatError(ValueError):
    """Raised when a checkpoint file is malformed or does not fit the model it describes."""


# ---------------------------------------------------------------------------
# Conditioning packs
# ---------------------------------------------------------------------------


def attention_shapes(height: int, width: int, levels: int = NUM_LEVELS) -> tuple[tuple[int, int], ...]:
    """Spatial shapes of the self-attention levels (all but the finest)."""
    factor = 2 ** (levels - 1)
    if height % factor or width % factor:
        raise ValueError(f"image size {height}x{width} must be divisible by {factor}")
    return tuple((height // 2**level, width // 2**level) for level in range(1, levels))


def _as_shape(shape: Shape) -> tuple[int, int]:
    if isinstance(shape, int):
        return shape, shape
    return int(shape[0]), int(shape[1])


def downsample_log_density(density_map: DensityMap, shapes: Sequence[Shape]) -> tuple[np.ndarray, ...]:
    """Average-pool the density to each target shape, then take ``ln``."""
    height, width = density_map.shape
    pyramid = []
    for shape in shapes:
        target_h, target_w = _as_shape(shape)
        if target_h < 1 or target_w < 1 or height % target_h or width % target_w:
            raise ValueError(f"density {height}x{width} cannot be pooled to {target_h}x{target_w}")
        pooled = density_map.values.reshape(target_h, height // target_h, target_w, width // target_w).mean(axis=(1, 3))
        pyramid.append(np.log(pooled))
    return tuple(pyramid)


@dataclass
class ConditioningPack:
    """Conditioning channels ``(H, W, C)`` and the log-density pyramid for attention."""

    mode: str
    channels: np.ndarray
    log_density_pyramid: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        if self.mode not in SUPPORTED_MODES:
            supported = ", ".join(sorted(SUPPORTED_MODES))
            raise ValueError(f"Unsupported conditioning mode '{self.mode}'. Supported: {supported}")
        channels = np.asarray(self.channels, dtype=np.float64)
        expected = CONDITIONING_CHANNELS[self.mode]
        if channels.ndim != 3 or channels.shape[2] != expected:
            raise ValueError(f"{self.mode} conditioning needs shape (H, W, {expected}), got {channels.shape}")
        if not np.all(np.isfinite(channels)):
            raise ValueError("conditioning channels must be finite")
        pyramid = tuple(np.asarray(level, dtype=np.float64) for level in self.log_density_pyramid)
        for index, level in enumerate(pyramid):
            if level.ndim != 2 or not np.all(np.isfinite(level)):
                raise ValueError(f"log-density level {index} must be a finite 2-D array, got shape {level.shape}")
        self.channels = channels
        self.log_density_pyramid = pyramid

    @property
    def shape(self) -> tuple[int, int]:
        return self.channels.shape[:2]  # type: ignore[return-value]

    def without_reweighting(self) -> ConditioningPack:
        """Same channels with an all-zero log-density pyramid (plain attention)."""
        return replace(self, log_density_pyramid=tuple(np.zeros_like(level) for level in self.log_density_pyramid))

    def with_zero_channels(self) -> ConditioningPack:
        return replace(self, channels=np.zeros_like(self.channels))


def positional_pack(
    field: WarpField,
    shapes: Sequence[Shape],
    density_map: Optional[DensityMap] = None,
) -> ConditioningPack:
    densities = density_map if density_map is not None else density(field)
    return ConditioningPack(MODE_POSITIONAL, field.coords, downsample_log_density(densities, shapes))


def metric_pack(
    field: WarpField,
    shapes: Sequence[Shape],
    *,
    zero_distance: bool = False,
    trivial_metric: bool = False,
) -> ConditioningPack:
    """Pullback-metric conditioning ``(g11, g22, g12, dist)``.

    ``zero_distance`` drops the distance channel; ``trivial_metric`` replaces
    the metric with the identity and also zeroes the distance.
    """
    metric = pullback_metric(field)
    channels = metric.stack()
    if trivial_metric:
        channels = np.zeros_like(channels)
        channels[..., 0] = 1.0
        channels[..., 1] = 1.0
    elif zero_distance:
        channels[..., 3] = 0.0
    return ConditioningPack(MODE_METRIC, channels, downsample_log_density(density(field), shapes))


def build_pack(field: WarpField, mode: str, shapes: Sequence[Shape]) -> ConditioningPack:
    if mode == MODE_POSITIONAL:
        return positional_pack(field, shapes)
    if mode == MODE_METRIC:
        return metric_pack(field, shapes)
    raise ValueError(f"Unsupported conditioning mode '{mode}'. Supported: {', '.join(sorted(SUPPORTED_MODES))}")


def sphere_positional_pack(height: int, width: int, scale: float = POSITIONAL_SCALE) -> ConditioningPack:
    """Panorama pack: ``(alpha sin(theta), theta)`` channels with ``|sin theta|`` density."""
    field = sphere_positional_field(height, width, scale)
    shapes = attention_shapes(height, width)
    return ConditioningPack(
        MODE_POSITIONAL,
        field.coords,
        downsample_log_density(sphere_positional_density(height, width), shapes),
    )


def sphere_metric_conditioning(height: int, width: int) -> ConditioningPack:
    metric, densities = sphere_metric_pack(height, width)
    return ConditioningPack(MODE_METRIC, metric.stack(), downsample_log_density(densities, attention_shapes(height, width)))


# ---------------------------------------------------------------------------
# Diffusion schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiffusionSchedule:
    """Cosine noise schedule; ``alpha_bars()[t]`` is the signal level after step ``t``."""

    steps: int = DEFAULT_TRAIN_STEPS
    cosine_s: float = 0.008
    max_beta: float = 0.999

    def __post_init__(self) -> None:
        if self.steps < 2:
            raise ValueError(f"schedule needs at least 2 steps, got {self.steps}")
        if self.cosine_s <= 0 or not 0 < self.max_beta < 1:
            raise ValueError(f"invalid schedule constants s={self.cosine_s}, max_beta={self.max_beta}")

    def betas(self) -> np.ndarray:
        t = np.arange(self.steps + 1, dtype=np.float64) / self.steps
        f = np.cos((t + self.cosine_s) / (1.0 + self.cosine_s) * math.pi / 2.0) ** 2
        return np.clip(1.0 - f[1:] / f[:-1], 0.0, self.max_beta)

    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(1.0 - self.betas())

    def respaced(self, count: int) -> np.ndarray:
        """Increasing subset of ``count`` timesteps spanning the whole schedule."""
        if not 1 <= count <= self.steps:
            raise ValueError(f"sampling steps must be in [1, {self.steps}], got {count}")
        return np.unique(np.round(np.linspace(0, self.steps - 1, count)).astype(np.int64))


def add_noise(
    x0: torch.Tensor,
    t: Union[int, torch.Tensor],
    schedule: DiffusionSchedule,
    generator: Optional[torch.Generator] = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Forward process ``x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``."""
    alpha_bars = torch.as_tensor(schedule.alpha_bars(), dtype=x0.dtype, device=x0.device)
    index = torch.as_tensor(t, dtype=torch.long, device=x0.device)
    if (index < 0).any() or (index >= schedule.steps).any():
        raise ValueError(f"timestep must be in [0, {schedule.steps - 1}]")
    alpha_bar = alpha_bars[index]
    if alpha_bar.ndim == 1:
        alpha_bar = alpha_bar.view(-1, *([1] * (x0.ndim - 1)))
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype, device=x0.device)
    return alpha_bar.sqrt() * x0 + (1.0 - alpha_bar).sqrt() * eps, eps


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DenoiserConfig:
    image_channels: int = 1
    cond_mode: str = MODE_POSITIONAL
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 2)
    num_classes: int = 6
    num_heads: int = 4

    def __post_init__(self) -> None:
        if self.cond_mode not in SUPPORTED_MODES:
            raise ValueError(f"Unsupported cond_mode '{self.cond_mode}'. Supported: {', '.join(sorted(SUPPORTED_MODES))}")
        if len(self.channel_mults) != NUM_LEVELS:
            raise ValueError(f"channel_mults needs {NUM_LEVELS} entries, got {self.channel_mults}")
        if self.image_channels < 1 or self.num_classes < 1 or self.base_channels < 1:
            raise ValueError("image_channels, num_classes and base_channels must be >= 1")
        for width in self.level_channels[1:]:
            if width % self.num_heads:
                raise ValueError(f"num_heads {self.num_heads} must divide attention width {width}")

    @property
    def cond_channels(self) -> int:
        return CONDITIONING_CHANNELS[self.cond_mode]

    @property
    def level_channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * mult for mult in self.channel_mults)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["channel_mults"] = list(self.channel_mults)
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> DenoiserConfig:
        known = {item.name for item in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"Unknown denoiser config field(s): {', '.join(unknown)}")
        values = dict(data)
        if "channel_mults" in values:
            values["channel_mults"] = tuple(int(m) for m in values["channel_mults"])
        return cls(**values)


def _groups(channels: int) -> int:
    return math.gcd(8, channels)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    angles = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResidualBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, emb_dim: int) -> None:
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_channels), in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_channels)
        self.norm2 = nn.GroupNorm(_groups(out_channels), out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class DensityAttention(nn.Module):
    """Multi-head self-attention over pixels with a per-key ``ln d`` score shift."""

    def __init__(self, channels: int, num_heads: int) -> None:
        super().__init__()
        self.num_heads = num_heads
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor, log_density: Optional[torch.Tensor]) -> torch.Tensor:
        b, c, h, w = x.shape
        qkv = self.qkv(self.norm(x)).reshape(b, 3, self.num_heads, c // self.num_heads, h * w)
        q, k, v = (qkv[:, i].transpose(-2, -1) for i in range(3))
        shift = None if log_density is None else log_density[:, None, :]
        out = shifted_attention(q, k, v, shift)
        return x + self.proj(out.transpose(-2, -1).reshape(b, c, h, w))


class _Upsample(nn.Module):
    def __init__(self, channels: int) -> None:
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


class DenoiserModel(nn.Module):
    """Three-level encoder-decoder predicting the added noise.

    Input weights reading the conditioning channels and the output layer start
    at zero, so before training the prediction ignores the conditioning.
    """

    def __init__(self, config: DenoiserConfig) -> None:
        super().__init__()
        self.config = config
        c0, c1, c2 = config.level_channels
        base = config.base_channels
        emb_dim = 4 * base
        heads = config.num_heads

        self.time_mlp = nn.Sequential(nn.Linear(base, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.class_embedding = nn.Embedding(config.num_classes, emb_dim)
        self.input_conv = nn.Conv2d(config.image_channels + config.cond_channels, c0, 3, padding=1)

        self.down0 = ResidualBlock(c0, c0, emb_dim)
        self.downsample0 = nn.Conv2d(c0, c0, 3, stride=2, padding=1)
        self.down1 = ResidualBlock(c0, c1, emb_dim)
        self.down1_attn = DensityAttention(c1, heads)
        self.downsample1 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.down2 = ResidualBlock(c1, c2, emb_dim)
        self.down2_attn = DensityAttention(c2, heads)

        self.mid1 = ResidualBlock(c2, c2, emb_dim)
        self.mid_attn = DensityAttention(c2, heads)
        self.mid2 = ResidualBlock(c2, c2, emb_dim)

        self.up2 = ResidualBlock(c2 + c2, c2, emb_dim)
        self.up2_attn = DensityAttention(c2, heads)
        self.upsample1 = _Upsample(c2)
        self.up1 = ResidualBlock(c2 + c1, c1, emb_dim)
        self.up1_attn = DensityAttention(c1, heads)
        self.upsample0 = _Upsample(c1)
        self.up0 = ResidualBlock(c1 + c0, c0, emb_dim)

        self.out_norm = nn.GroupNorm(_groups(c0), c0)
        self.out_conv = nn.Conv2d(c0, config.image_channels, 3, padding=1)
        self.reset_conditioning_weights()

    def reset_conditioning_weights(self) -> None:
        with torch.no_grad():
            self.input_conv.weight[:, self.config.image_channels:].zero_()
            self.out_conv.weight.zero_()
            self.out_conv.bias.zero_()

    def _check_inputs(self, x: torch.Tensor, cond: torch.Tensor, pyramid: Sequence[Optional[torch.Tensor]]) -> None:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.image_channels:
            raise ValueError(f"image batch must be (B, {cfg.image_channels}, H, W), got {tuple(x.shape)}")
        if cond.shape[0] != x.shape[0] or cond.shape[1] != cfg.cond_channels or cond.shape[2:] != x.shape[2:]:
            raise ValueError(
                f"conditioning {tuple(cond.shape)} does not fit model: expected "
                f"({x.shape[0]}, {cfg.cond_channels}, {x.shape[2]}, {x.shape[3]})"
            )
        shapes = attention_shapes(int(x.shape[2]), int(x.shape[3]))
        if len(pyramid) != len(shapes):
            raise ValueError(f"log-density pyramid needs {len(shapes)} levels, got {len(pyramid)}")
        for level, (shape, log_d) in enumerate(zip(shapes, pyramid)):
            if log_d is not None and tuple(log_d.shape) != (x.shape[0], shape[0] * shape[1]):
                raise ValueError(
                    f"log-density level {level} must be ({x.shape[0]}, {shape[0] * shape[1]}), got {tuple(log_d.shape)}"
                )

    def forward(
        self,
        x: torch.Tensor,
        t: torch.Tensor,
        class_ids: torch.Tensor,
        cond: torch.Tensor,
        log_density: Sequence[Optional[torch.Tensor]],
    ) -> torch.Tensor:
        self._check_inputs(x, cond, log_density)
        ld1, ld2 = log_density
        emb = self.time_mlp(timestep_embedding(t, self.config.base_channels)) + self.class_embedding(class_ids)

        h0 = self.down0(self.input_conv(torch.cat([x, cond.to(x.dtype)], dim=1)), emb)
        h1 = self.down1_attn(self.down1(self.downsample0(h0), emb), ld1)
        h2 = self.down2_attn(self.down2(self.downsample1(h1), emb), ld2)

        m = self.mid2(self.mid_attn(self.mid1(h2, emb), ld2), emb)

        u2 = self.up2_attn(self.up2(torch.cat([m, h2], dim=1), emb), ld2)
        u1 = self.up1_attn(self.up1(torch.cat([self.upsample1(u2), h1], dim=1), emb), ld1)
        u0 = self.up0(torch.cat([self.upsample0(u1), h0], dim=1), emb)
        return self.out_conv(F.silu(self.out_norm(u0)))


# ---------------------------------------------------------------------------
# Batches, training and sampling
# ---------------------------------------------------------------------------


@dataclass
class DenoiserBatch:
    """Model-ready tensors; images are scaled to [-1, 1]."""

    images: torch.Tensor
    class_ids: torch.Tensor
    cond: torch.Tensor
    log_density: tuple[torch.Tensor, ...]

    @property
    def size(self) -> int:
        return int(self.images.shape[0])


def _pack_tensors(packs: Sequence[ConditioningPack], device: torch.device | str) -> tuple[torch.Tensor, tuple[torch.Tensor, ...]]:
    modes = {pack.mode for pack in packs}
    if len(modes) != 1:
        raise ValueError(f"all packs in a batch must share one mode, got {sorted(modes)}")
    cond = torch.as_tensor(np.stack([pack.channels for pack in packs]), dtype=torch.float32, device=device)
    levels = len(packs[0].log_density_pyramid)
    pyramid = tuple(
        torch.as_tensor(
            np.stack([pack.log_density_pyramid[level].reshape(-1) for pack in packs]),
            dtype=torch.float32,
            device=device,
        )
        for level in range(levels)
    )
    return cond.permute(0, 3, 1, 2).contiguous(), pyramid


def collate_batch(
    images: Sequence[np.ndarray],
    class_ids: Sequence[int],
    packs: Sequence[ConditioningPack],
    device: torch.device | str = "cpu",
) -> DenoiserBatch:
    if not (len(images) == len(class_ids) == len(packs)) or not images:
        raise ValueError("images, class_ids and packs must be non-empty and of equal length")
    for image, pack in zip(images, packs):
        if image.shape[:2] != pack.shape:
            raise ValueError(f"image {image.shape[:2]} and conditioning {pack.shape} differ in size")
    pixels = torch.as_tensor(np.stack(images), dtype=torch.float32, device=device).permute(0, 3, 1, 2)
    cond, pyramid = _pack_tensors(packs, device)
    return DenoiserBatch(
        images=pixels.contiguous() * 2.0 - 1.0,
        class_ids=torch.as_tensor(list(class_ids), dtype=torch.long, device=device),
        cond=cond,
        log_density=pyramid,
    )


def _noise_prediction_mse(
    model: DenoiserModel,
    batch: DenoiserBatch,
    schedule: DiffusionSchedule,
    generator: Optional[torch.Generator],
) -> torch.Tensor:
    t = torch.randint(0, schedule.steps, (batch.size,), generator=generator).to(batch.images.device)
    noisy, eps = add_noise(batch.images, t, schedule, generator)
    prediction = model(noisy, t, batch.class_ids, batch.cond, batch.log_density)
    return F.mse_loss(prediction, eps)


def noise_prediction_loss(
    model: DenoiserModel,
    batch: DenoiserBatch,
    schedule: DiffusionSchedule,
    generator: Optional[torch.Generator] = None,
) -> float:
    """The training loss on ``batch`` without updating the model."""
    model.eval()
    with torch.no_grad():
        return float(_noise_prediction_mse(model, batch, schedule, generator))


def train_step(
    model: DenoiserModel,
    optimizer: torch.optim.Optimizer,
    batch: DenoiserBatch,
    schedule: DiffusionSchedule,
    generator: Optional[torch.Generator] = None,
) -> float:
    """One noise-prediction MSE update on a batch with uniformly drawn timesteps."""
    model.train()
    loss = _noise_prediction_mse(model, batch, schedule, generator)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def sample(
    model: DenoiserModel,
    pack: ConditioningPack,
    class_id: int,
    steps: int = DEFAULT_SAMPLE_STEPS,
    generator: Optional[torch.Generator] = None,
    seam_fraction: Optional[float] = None,
    schedule: Optional[DiffusionSchedule] = None,
) -> np.ndarray:
    """Ancestral sampling over a respaced schedule; returns an ``(H, W, C)`` image in [0, 1].

    With ``seam_fraction`` set, the right border strip is overwritten with the
    left one after every step.
    """
    schedule = schedule or DiffusionSchedule()
    device = next(model.parameters()).device
    cond, pyramid = _pack_tensors([pack], device)
    height, width = pack.shape
    timesteps = schedule.respaced(steps)
    alpha_bars = schedule.alpha_bars()
    class_tensor = torch.as_tensor([class_id], dtype=torch.long, device=device)

    model.eval()
    with torch.no_grad():
        x = torch.randn((1, model.config.image_channels, height, width), generator=generator).to(device)
        for i in reversed(range(len(timesteps))):
            t = int(timesteps[i])
            ab = float(alpha_bars[t])
            ab_prev = float(alpha_bars[timesteps[i - 1]]) if i > 0 else 1.0
            eps = model(x, torch.full((1,), t, dtype=torch.long, device=device), class_tensor, cond, pyramid)
            x0 = ((x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)).clamp(-1.0, 1.0)
            alpha = ab / ab_prev
            beta = 1.0 - alpha
            mean = (math.sqrt(ab_prev) * beta / (1.0 - ab)) * x0 + (math.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)) * x
            if i > 0:
                variance = beta * (1.0 - ab_prev) / (1.0 - ab)
                noise = torch.randn(x.shape, generator=generator).to(device)
                x = mean + math.sqrt(variance) * noise
            else:
                x = mean
            if seam_fraction is not None:
                x = seam_blend(x, seam_fraction, axis=-1)
    image = x[0].permute(1, 2, 0).double().cpu().numpy()
    return np.clip((image + 1.0) / 2.0, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, model: DenoiserModel, schedule: Optional[DiffusionSchedule] = None) -> Path:
    """Write ``CDM1``, a little-endian uint32 header length, a JSON header and the f32 blob.

    The header lists every tensor name and shape in blob order.
    """
    schedule = schedule or DiffusionSchedule()
    state = model.state_dict()
    header = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "schedule": asdict(schedule),
        "tensors": [[name, list(tensor.shape)] for name, tensor in state.items()],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(
        tensor.detach().cpu().to(torch.float32).contiguous().numpy().astype(CHECKPOINT_DTYPE).tobytes()
        for tensor in state.values()
    )
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(CHECKPOINT_MAGIC + len(header_bytes).to_bytes(4, "little") + header_bytes + blob)
    logger.info("Saved checkpoint %s (%d tensors, %d bytes)", target, len(state), target.stat().st_size)
    return target


def load_checkpoint(path: str | Path, device: torch.device | str = "cpu") -> tuple[DenoiserModel, DiffusionSchedule]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"checkpoint magic: expected 'CDM1', got {data[:4]!r}")
    if len(data) < 8:
        raise CheckpointFormatError("checkpoint header length: file is truncated")
    header_len = int.from_bytes(data[4:8], "little")
    try:
        header = json.loads(data[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"checkpoint header: not valid JSON ({exc})") from None
    for key in ("version", "config", "schedule", "tensors"):
        if key not in header:
            raise CheckpointFormatError(f"checkpoint header: missing '{key}'")
    if header["version"] != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"checkpoint version: unsupported {header['version']}")
    try:
        config = DenoiserConfig.from_dict(header["config"])
        schedule = DiffusionSchedule(**header["schedule"])
    except (TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"checkpoint config: {exc}") from None

    model = DenoiserModel(config)
    expected = model.state_dict()
    listed = header["tensors"]
    if [name for name, _ in listed] != list(expected):
        raise CheckpointFormatError("checkpoint tensors: names do not match the model layout")
    offset = 8 + header_len
    state = {}
    for name, shape in listed:
        if tuple(shape) != tuple(expected[name].shape):
            raise CheckpointFormatError(f"checkpoint tensor '{name}': shape {shape} != {list(expected[name].shape)}")
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + count * CHECKPOINT_DTYPE.itemsize
        if end > len(data):
            raise CheckpointFormatError(f"checkpoint tensor '{name}': payload is truncated")
        values = np.frombuffer(data[offset:end], dtype=CHECKPOINT_DTYPE).reshape(shape)
        state[name] = torch.from_numpy(values.astype(np.float32))
        offset = end
    if offset != len(data):
        raise CheckpointFormatError(f"checkpoint payload: {len(data) - offset} trailing bytes")
    model.load_state_dict(state)
    return model.to(device), schedule
