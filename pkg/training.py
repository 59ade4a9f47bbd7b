"""Training loop for the warp-conditioned denoiser."""

from __future__ import annotations

import logging
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Final, Optional, Sequence

import numpy as np
import torch

from datagen import FAMILIES, TrainingSample, make_training_sample, sample_rng
from denoiser import (
    DenoiserBatch,
    DenoiserConfig,
    DenoiserModel,
    DiffusionSchedule,
    collate_batch,
    train_step,
)
from lens import DEFAULT_SCHEDULE, WarpSchedule

logger = logging.getLogger(__name__)

DEFAULT_LEARNING_RATE: Final = 2e-4
DEFAULT_BATCH_SIZE: Final = 16
DEFAULT_LOG_EVERY: Final = 100


@dataclass(frozen=True)
class TrainingConfig:
    steps: int = 2000
    batch_size: int = DEFAULT_BATCH_SIZE
    learning_rate: float = DEFAULT_LEARNING_RATE
    model_res: int = 64
    seed: int = 0
    threads: int = 1
    families: tuple[str, ...] = FAMILIES
    reweighting: bool = True
    # False trains the unconditional baseline: conditioning channels are zeroed.
    conditioning: bool = True
    log_every: int = DEFAULT_LOG_EVERY
    device: str = "cpu"
    warp_schedule: WarpSchedule = DEFAULT_SCHEDULE
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)

    def __post_init__(self) -> None:
        if self.steps < 1 or self.batch_size < 1 or self.threads < 1:
            raise ValueError("steps, batch_size and threads must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        unknown = sorted(set(self.families) - set(FAMILIES))
        if unknown or not self.families:
            raise ValueError(f"Unsupported families: {', '.join(unknown) or '(none given)'}")


@dataclass
class TrainingResult:
    model: DenoiserModel
    schedule: DiffusionSchedule
    losses: list[float]

    def mean_loss(self, first: int = 0, last: Optional[int] = None) -> float:
        window = self.losses[first:last]
        return float(np.mean(window)) if window else float("nan")


def generate_batch(
    config: TrainingConfig,
    step: int,
    pool: Optional[ThreadPoolExecutor] = None,
) -> list[TrainingSample]:
    """Samples for ``step``; sample ``i`` draws from ``sample_rng(seed, step * batch + i)``.

    Output does not depend on the number of worker threads.
    """
    progress = step / max(config.steps - 1, 1)
    indices = range(step * config.batch_size, (step + 1) * config.batch_size)

    def build(index: int) -> TrainingSample:
        return make_training_sample(
            sample_rng(config.seed, index),
            progress,
            config.model_res,
            families=config.families,
            mode=config.denoiser.cond_mode,
            schedule=config.warp_schedule,
        )

    if pool is None:
        return [build(index) for index in indices]
    return list(pool.map(build, indices))


def to_batch(samples: Sequence[TrainingSample], reweighting: bool, device: str, conditioning: bool = True) -> DenoiserBatch:
    packs = [sample.pack if reweighting else sample.pack.without_reweighting() for sample in samples]
    if not conditioning:
        packs = [pack.with_zero_channels() for pack in packs]
    return collate_batch([s.image for s in samples], [s.class_id for s in samples], packs, device)


def train(
    config: TrainingConfig,
    model: Optional[DenoiserModel] = None,
    schedule: Optional[DiffusionSchedule] = None,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> TrainingResult:
    """Run ``config.steps`` updates.

    Batches for the next step are generated on worker threads while the
    current step trains; only this thread touches the parameters.
    """
    torch.manual_seed(config.seed)
    if model is None:
        model = DenoiserModel(config.denoiser)
    model = model.to(config.device)
    schedule = schedule or DiffusionSchedule()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    generator = torch.Generator().manual_seed(config.seed)
    losses: list[float] = []
    started = time.perf_counter()

    logger.info(
        "Training %d steps, batch %d, res %d, families=%s, reweighting=%s, conditioning=%s, threads=%d",
        config.steps,
        config.batch_size,
        config.model_res,
        ",".join(config.families),
        config.reweighting,
        config.conditioning,
        config.threads,
    )
    with ThreadPoolExecutor(max_workers=config.threads) as workers, ThreadPoolExecutor(max_workers=1) as prefetch:
        pending: Future = prefetch.submit(generate_batch, config, 0, workers)
        for step in range(config.steps):
            samples = pending.result()
            if step + 1 < config.steps:
                pending = prefetch.submit(generate_batch, config, step + 1, workers)
            loss = train_step(model, optimizer, to_batch(samples, config.reweighting, config.device, config.conditioning), schedule, generator)
            losses.append(loss)
            if on_step is not None:
                on_step(step, loss)
            if config.log_every and (step + 1) % config.log_every == 0:
                recent = float(np.mean(losses[-config.log_every:]))
                logger.info("step %d/%d loss %.4f (%.1fs)", step + 1, config.steps, recent, time.perf_counter() - started)
    return TrainingResult(model, schedule, losses)
