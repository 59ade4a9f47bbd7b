#!/usr/bin/env python3
"""Acceptance harness for WarpCond: numerical checks, desk-scale training and fidelity."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from dotenv import load_dotenv

load_dotenv(ROOT / ".env")

import numpy as np
import torch

import settings
from datagen import (
    FAMILY_CHECKER,
    FAMILY_DOTS,
    FAMILY_RINGS,
    FAMILY_STRIPES_H,
    FAMILY_STRIPES_V,
    PatternSpec,
    make_training_sample,
    sample_rng,
)
from denoiser import (
    DenoiserConfig,
    DenoiserModel,
    DiffusionSchedule,
    attention_shapes,
    positional_pack,
    sample,
    sphere_positional_pack,
)
from evalfid import (
    ORIENTATION_HORIZONTAL,
    EvalRecord,
    content_centroid,
    format_report,
    psnr,
    run_fidelity_study,
    straightness,
    summarize_fidelity,
)
from grid import WarpField, corner_squeeze_field, normalized_grid
from lens import BRANCH_NONE, NO_DISTORTION, LensDraw, LensParams, fisheye, warp_field_from_lens
from resample import remap, unwarp
from selftest import (
    check_differential_consistency,
    check_duplication_equivalence,
    check_sampler_distribution,
    check_scale_invariance,
    check_sphere_pack,
    check_zero_init_parity,
)
from sphere import DEFAULT_SEAM_FRACTION, seam_discrepancy
from training import TrainingConfig, train

logger = logging.getLogger("eval.run_eval")

DEFAULT_REPORTS_DIR = Path(__file__).resolve().parent / "reports"
DEFAULT_TRAIN_STEPS = 2000
DEFAULT_MODEL_RES = 64
TRAINING_FAMILIES = ("stripes-h", "stripes-v", "checker")

ROUND_TRIP_SIZE = 256
ROUND_TRIP_K1 = 0.2
ROUND_TRIP_MIN_PSNR = 30.0
IDENTITY_FACTOR = 1.5
FISHEYE_FACTOR = 2.0
FISHEYE_K1 = 5.0
SEAM_TOL = 1e-3
CORPUS_SAMPLES = 64
PATTERN_CONTROL_FAMILIES = (FAMILY_CHECKER, FAMILY_RINGS, FAMILY_DOTS)
SQUEEZE_STRENGTH = 1.0
# Undistorted stripes straighten to ~0, so the identity bound is taken from at least this level.
STRAIGHTNESS_FLOOR = 0.01
MIN_LOSS_DROP = 0.3


@dataclass
class TrainedModel:
    model: DenoiserModel
    schedule: DiffusionSchedule
    seconds: float
    first_loss: float
    last_loss: float


def check_round_trip(size: int = ROUND_TRIP_SIZE, k1: float = ROUND_TRIP_K1) -> list[EvalRecord]:
    """remap then unwarp a smooth gradient; PSNR over covered pixels."""
    ys, xs = np.mgrid[0:size, 0:size] / (size - 1.0)
    source = (0.2 + 0.5 * xs + 0.3 * ys * ys)[..., None]
    field = warp_field_from_lens(LensParams(k1=k1), size, size)
    started = time.perf_counter()
    warped, covered = remap(source, field)
    rectified, rect_covered = unwarp(warped, field, (size, size), mask=covered)
    elapsed = time.perf_counter() - started
    value = psnr(rectified, source, rect_covered)
    return [
        EvalRecord("resample.round_trip_psnr_db", value, f">={ROUND_TRIP_MIN_PSNR:g}", value >= ROUND_TRIP_MIN_PSNR),
        EvalRecord("resample.round_trip_seconds", elapsed, "<10", elapsed < 10.0),
    ]


def train_desk_model(steps: int, model_res: int, seed: int, threads: int, reweighting: bool = True) -> TrainedModel:
    config = TrainingConfig(
        steps=steps,
        model_res=model_res,
        seed=seed,
        threads=threads,
        families=TRAINING_FAMILIES,
        reweighting=reweighting,
    )
    started = time.perf_counter()
    result = train(config)
    window = max(1, steps // 10)
    return TrainedModel(
        model=result.model,
        schedule=result.schedule,
        seconds=time.perf_counter() - started,
        first_loss=result.mean_loss(0, window),
        last_loss=result.mean_loss(-window),
    )


def loss_drop_fraction(trained: TrainedModel) -> float:
    """Relative drop from the first to the last training-loss window; nan when the first window is 0."""
    if trained.first_loss <= 0.0:
        return float("nan")
    return 1.0 - trained.last_loss / trained.first_loss


def corpus_straightness(model_res: int, seed: int, count: int = CORPUS_SAMPLES) -> float:
    """Mean straightness of undistorted training samples of horizontal stripes."""
    undistorted = LensDraw(NO_DISTORTION, None, BRANCH_NONE)
    values = []
    for index in range(count):
        rng = sample_rng(seed + 1, index)
        item = make_training_sample(rng, 0.0, model_res, families=(FAMILY_STRIPES_H,), lens_draw=undistorted)
        values.append(straightness(item.image, ORIENTATION_HORIZONTAL, item.field.valid))
    return float(np.nanmean(values))


def _sampled_straightness(
    trained: TrainedModel,
    field: WarpField,
    seeds: Sequence[int],
    *,
    reweighting: bool = True,
    rectify: bool = False,
) -> float:
    shapes = attention_shapes(field.height, field.width)
    pack = positional_pack(field, shapes)
    if not reweighting:
        pack = pack.without_reweighting()
    class_id = PatternSpec(FAMILY_STRIPES_H).class_id
    values = []
    for seed in seeds:
        image = sample(trained.model, pack, class_id, generator=torch.Generator().manual_seed(seed), schedule=trained.schedule)
        mask = None
        if rectify:
            image, mask = unwarp(image, field, field.shape)
        values.append(straightness(image, ORIENTATION_HORIZONTAL, mask))
    return float(np.nanmean(values))


def check_training(trained: TrainedModel, model_res: int, seed: int, seeds: Sequence[int]) -> list[EvalRecord]:
    corpus = corpus_straightness(model_res, seed)
    identity = _sampled_straightness(trained, normalized_grid(model_res, model_res), seeds)
    fisheye_field = warp_field_from_lens(fisheye(FISHEYE_K1), model_res, model_res)
    rectified = _sampled_straightness(trained, fisheye_field, seeds, rectify=True)
    ablation = _sampled_straightness(trained, fisheye_field, seeds, reweighting=False, rectify=True)
    identity_bound = IDENTITY_FACTOR * max(corpus, STRAIGHTNESS_FLOOR)
    loss_drop = loss_drop_fraction(trained)
    fisheye_bound = FISHEYE_FACTOR * identity
    return [
        EvalRecord("training.loss_first", trained.first_loss, "info", True),
        EvalRecord("training.loss_last", trained.last_loss, "info", True),
        EvalRecord("training.loss_drop", loss_drop, f">={MIN_LOSS_DROP:g}", loss_drop >= MIN_LOSS_DROP),
        EvalRecord("training.seconds", trained.seconds, "info", True),
        EvalRecord("training.corpus_straightness", corpus, "info", True),
        EvalRecord("training.identity_straightness", identity, f"<={identity_bound:.4g}", identity <= identity_bound),
        EvalRecord("training.fisheye_unwarped_straightness", rectified, f"<={fisheye_bound:.4g}", rectified <= fisheye_bound),
        EvalRecord("training.fisheye_no_reweighting_straightness", ablation, "info", True),
    ]


def _mean_centroid(
    trained: TrainedModel,
    field: WarpField,
    seeds: Sequence[int],
    *,
    reweighting: bool = True,
    rectify: bool = True,
) -> np.ndarray:
    pack = positional_pack(field, attention_shapes(field.height, field.width))
    if not reweighting:
        pack = pack.without_reweighting()
    class_id = PatternSpec(FAMILY_CHECKER).class_id
    centroids = []
    for seed in seeds:
        image = sample(trained.model, pack, class_id, generator=torch.Generator().manual_seed(seed), schedule=trained.schedule)
        mask = None
        if rectify:
            image, mask = unwarp(image, field, field.shape)
        try:
            centroids.append(content_centroid(image, mask))
        except ValueError:
            logger.warning("sample %d has no covered content; skipped in the centroid mean", seed)
    return np.mean(centroids, axis=0) if centroids else np.full(2, np.nan)


def check_reweighting_centroid(trained: TrainedModel, model_res: int, seeds: Sequence[int]) -> list[EvalRecord]:
    """Corner-squeeze ablation: how far unwarped content drifts from identity-grid samples.

    The squeeze leaves the top-left low-density; without reweighting the model
    over-fills it, pulling the unwarped centroid toward that corner.
    """
    squeeze = corner_squeeze_field(model_res, model_res, SQUEEZE_STRENGTH)
    baseline = _mean_centroid(trained, normalized_grid(model_res, model_res), seeds, rectify=False)
    reweighted = _mean_centroid(trained, squeeze, seeds)
    plain = _mean_centroid(trained, squeeze, seeds, reweighting=False)
    shift = float(np.hypot(*(reweighted - baseline)))
    shift_plain = float(np.hypot(*(plain - baseline)))
    return [
        EvalRecord("training.squeeze_centroid_shift", shift, "info", True),
        EvalRecord("training.squeeze_centroid_shift_no_reweighting", shift_plain, "info", True),
    ]


def check_seam(model: DenoiserModel, schedule: DiffusionSchedule, model_res: int, seed: int) -> list[EvalRecord]:
    pack = sphere_positional_pack(model_res, 2 * model_res)
    image = sample(model, pack, 0, generator=torch.Generator().manual_seed(seed), seam_fraction=DEFAULT_SEAM_FRACTION, schedule=schedule)
    value = seam_discrepancy(image[..., 0])
    return [EvalRecord("sphere.seam_discrepancy", value, f"<={SEAM_TOL:g}", value <= SEAM_TOL)]


def check_fidelity(res: int, seeds: Sequence[int], trained: Optional[TrainedModel], threads: int) -> list[EvalRecord]:
    specs = [PatternSpec(FAMILY_STRIPES_H, 4.0), PatternSpec(FAMILY_STRIPES_V, 4.0)]
    generate = None
    if trained is not None:

        def generate(spec: PatternSpec, field: WarpField, seed: int) -> np.ndarray:
            pack = positional_pack(field, attention_shapes(field.height, field.width))
            generator = torch.Generator().manual_seed(seed)
            return sample(trained.model, pack, spec.class_id, generator=generator, schedule=trained.schedule)

    rows = run_fidelity_study(specs, seeds, res, generate=generate, threads=threads)
    records = summarize_fidelity(rows)
    controls = [PatternSpec(family, 4.0) for family in PATTERN_CONTROL_FAMILIES]
    records += summarize_fidelity(run_fidelity_study(controls, seeds, res, threads=threads), prefix="fidelity.pattern_controls")
    return records


def write_report(reports_dir: Path, records: Sequence[EvalRecord], *, config: dict) -> Path:
    reports_dir.mkdir(parents=True, exist_ok=True)
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    report_path = reports_dir / f"acceptance_{stamp}.json"
    payload = {
        "generated_at": stamp,
        "config": config,
        "records": [asdict(record) for record in records],
    }
    report_path.write_text(json.dumps(payload, indent=2, default=_json_default), encoding="utf-8")
    (reports_dir / f"acceptance_{stamp}.txt").write_text(format_report(records), encoding="utf-8")
    return report_path


def _json_default(value: object) -> object:
    if isinstance(value, float) and math.isnan(value):
        return None
    return str(value)


def check_thresholds(records: Sequence[EvalRecord]) -> list[str]:
    return [f"{record.name}: {record.value:.6g} outside {record.tolerance}" for record in records if not record.passed]


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Run WarpCond acceptance checks.")
    parser.add_argument("--reports-dir", type=Path, default=DEFAULT_REPORTS_DIR)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("--model-res", type=int, default=DEFAULT_MODEL_RES)
    parser.add_argument("--train-steps", type=int, default=DEFAULT_TRAIN_STEPS, help="Desk-scale training steps (<= 20000).")
    parser.add_argument("--sample-seeds", type=int, default=4, help="Samples per training check.")
    parser.add_argument("--fidelity-seeds", type=int, default=2)
    parser.add_argument("--skip-training", action="store_true", help="Skip training; seam and fidelity use an untrained model or controls only.")
    parser.add_argument("--threshold", action="store_true", help="Exit non-zero when any check fails.")
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    settings.configure_logging()
    seed = settings.resolve_seed(args.seed)
    threads = settings.resolve_threads(args.threads)
    torch.set_num_threads(threads)
    config = {"seed": seed, "threads": threads, "model_res": args.model_res, "train_steps": args.train_steps}
    print(settings.format_resolved_config(config), flush=True)

    records: list[EvalRecord] = []
    records += check_duplication_equivalence(seed=seed)
    records += check_scale_invariance(seed=seed)
    records += check_differential_consistency(seed=seed)
    records += check_sphere_pack()
    records += check_round_trip()
    records += check_sampler_distribution(seed=seed)
    records += check_zero_init_parity(seed=seed)

    trained: Optional[TrainedModel] = None
    if not args.skip_training:
        print(f"Training desk model for {args.train_steps} steps...", flush=True)
        trained = train_desk_model(args.train_steps, args.model_res, seed, threads)
        records += check_training(trained, args.model_res, seed, range(args.sample_seeds))
        records += check_reweighting_centroid(trained, args.model_res, range(args.sample_seeds))
        records += check_seam(trained.model, trained.schedule, args.model_res, seed)
    else:
        torch.manual_seed(seed)
        records += check_seam(DenoiserModel(DenoiserConfig()), DiffusionSchedule(), args.model_res, seed)
    records += check_fidelity(args.model_res, range(args.fidelity_seeds), trained, threads)

    print("\nWarpCond acceptance\n", flush=True)
    print(format_report(records), end="", flush=True)
    report_path = write_report(args.reports_dir, records, config=config)
    print(f"\nReport written to {report_path}", flush=True)

    if args.threshold:
        failures = check_thresholds(records)
        if failures:
            print("\nThreshold failures:", file=sys.stderr)
            for failure in failures:
                print(f"  - {failure}", file=sys.stderr)
            return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
