#!/usr/bin/env python3
"""WarpCond command-line interface.

Every command accepts ``--seed``, ``--config``, ``--threads``, ``--device`` and
``--log-level``, prints its resolved configuration as one JSON line, and exits
0 on success, 1 on a validation error and 2 on an I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Final, Mapping, Optional, Sequence

import numpy as np
import torch
from dotenv import load_dotenv

import settings
from datagen import FAMILIES, PatternSpec, make_training_sample, sample_rng, save_sample
from denoiser import (
    MODE_METRIC,
    MODE_POSITIONAL,
    DenoiserConfig,
    attention_shapes,
    build_pack,
    load_checkpoint,
    sample,
    save_checkpoint,
    sphere_metric_conditioning,
    sphere_positional_pack,
)
from differential import density, pullback_metric
from evalfid import format_report, run_fidelity_study, summarize_fidelity
from field_io import (
    density_to_file,
    displacement_to_file,
    metric_to_file,
    read_field_file,
    read_png,
    warp_from_file,
    warp_to_file,
    write_field_file,
    write_png,
)
from grid import AXIS_VERTICAL, WarpField, corner_squeeze_field, flip_field, normalized_grid
from lens import LENS_PRESETS, LensParams, warp_field_from_lens
from resample import remap, unwarp
from selftest import all_passed, run_selftest
from sphere import DEFAULT_SEAM_FRACTION, PANORAMA_SHAPE, POSITIONAL_SCALE, sphere_metric_pack, sphere_positional_field
from training import TrainingConfig, train

logger = logging.getLogger(__name__)

EXIT_OK: Final = 0
EXIT_VALIDATION: Final = 1
EXIT_IO: Final = 2

COMMON_DEFAULTS: Final = {
    "seed": settings.DEFAULT_SEED,
    "threads": settings.DEFAULT_THREADS,
    "device": settings.DEFAULT_DEVICE,
    "log_level": settings.DEFAULT_LOG_LEVEL,
}
INTERNAL_KEYS: Final = frozenset({"command", "kind", "action", "suite", "config", "handler", "defaults"})
# Options whose default is None still need a type when read from a config file.
OPTIONAL_INT_KEYS: Final = frozenset({"h", "w"})
LENS_KEYS: Final = ("k1", "k2", "p1", "p2", "cx", "cy", "focal_scale")
OPTIONAL_FLOAT_KEYS: Final = frozenset({"seam_fraction", *LENS_KEYS})


class UsageError(ValueError):
    """Bad command-line usage; reported like any other validation error."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# Command handlers
# ---------------------------------------------------------------------------


def _require(config: Mapping[str, Any], *keys: str) -> None:
    for key in keys:
        if config.get(key) in (None, ""):
            raise UsageError(f"missing required option --{key.replace('_', '-')}")


def _families(raw: str) -> tuple[str, ...]:
    families = tuple(item.strip() for item in str(raw).split(",") if item.strip())
    unknown = [family for family in families if family not in FAMILIES]
    if unknown or not families:
        raise UsageError(f"--families: unsupported '{','.join(unknown) or raw}'. Supported: {', '.join(FAMILIES)}")
    return families


def cmd_field_lens(config: Mapping[str, Any]) -> int:
    _require(config, "out")
    preset = config["preset"]
    if preset is not None and preset not in LENS_PRESETS:
        raise UsageError(f"--preset: unsupported '{preset}'. Supported: {', '.join(LENS_PRESETS)}")
    base = LENS_PRESETS[preset] if preset is not None else LensParams()
    lens = replace(base, **{key: config[key] for key in LENS_KEYS if config[key] is not None})
    write_field_file(config["out"], warp_to_file(warp_field_from_lens(lens, config["h"], config["w"])))
    return EXIT_OK


def cmd_field_sphere_pos(config: Mapping[str, Any]) -> int:
    _require(config, "out")
    write_field_file(config["out"], warp_to_file(sphere_positional_field(config["h"], config["w"], config["sphere_scale"])))
    return EXIT_OK


def cmd_field_sphere_metric(config: Mapping[str, Any]) -> int:
    _require(config, "out")
    metric, _ = sphere_metric_pack(config["h"], config["w"])
    write_field_file(config["out"], metric_to_file(metric))
    return EXIT_OK


def cmd_field_flip(config: Mapping[str, Any]) -> int:
    _require(config, "out")
    write_field_file(config["out"], warp_to_file(flip_field(config["h"], config["w"], config["axis"])))
    return EXIT_OK


def cmd_field_squeeze(config: Mapping[str, Any]) -> int:
    _require(config, "out")
    write_field_file(config["out"], warp_to_file(corner_squeeze_field(config["h"], config["w"], config["strength"])))
    return EXIT_OK


def cmd_warp(config: Mapping[str, Any]) -> int:
    _require(config, "image", "field", "out")
    image = read_png(config["image"])
    warped, covered = remap(image, warp_from_file(read_field_file(config["field"])))
    write_png(config["out"], warped)
    if config.get("coverage"):
        write_png(config["coverage"], covered.astype(np.float64))
    logger.info("warp: %d of %d pixels covered", int(covered.sum()), covered.size)
    return EXIT_OK


def cmd_unwarp(config: Mapping[str, Any]) -> int:
    _require(config, "image", "field", "out")
    field = warp_from_file(read_field_file(config["field"]))
    out_dims = (config["h"] or field.height, config["w"] or field.width)
    mask = read_png(config["mask"])[..., 0] > 0.5 if config.get("mask") else None
    rectified, covered = unwarp(read_png(config["image"]), field, out_dims, mask=mask)
    write_png(config["out"], rectified)
    if config.get("coverage"):
        write_png(config["coverage"], covered.astype(np.float64))
    logger.info("unwarp: %d of %d pixels covered", int(covered.sum()), covered.size)
    return EXIT_OK


def cmd_density(config: Mapping[str, Any]) -> int:
    _require(config, "field", "out")
    write_field_file(config["out"], density_to_file(density(warp_from_file(read_field_file(config["field"])))))
    return EXIT_OK


def cmd_metric(config: Mapping[str, Any]) -> int:
    _require(config, "field", "out")
    write_field_file(config["out"], metric_to_file(pullback_metric(warp_from_file(read_field_file(config["field"])))))
    return EXIT_OK


def cmd_dataset_gen(config: Mapping[str, Any]) -> int:
    _require(config, "out_dir")
    families = _families(config["families"])
    out_dir = Path(config["out_dir"])
    for index in range(config["count"]):
        sample_ = make_training_sample(
            sample_rng(config["seed"], index),
            config["progress"],
            config["model_res"],
            families=families,
            mode=config["cond_mode"],
        )
        save_sample(out_dir / f"{index:05d}", sample_)
    logger.info("Wrote %d samples to %s", config["count"], out_dir)
    return EXIT_OK


def cmd_train(config: Mapping[str, Any]) -> int:
    _require(config, "out")
    training_config = TrainingConfig(
        steps=config["steps"],
        batch_size=config["batch_size"],
        learning_rate=config["lr"],
        model_res=config["model_res"],
        seed=config["seed"],
        threads=config["threads"],
        families=_families(config["families"]),
        reweighting=not config["no_reweighting"],
        log_every=config["log_every"],
        device=config["device"],
        denoiser=DenoiserConfig(cond_mode=config["cond_mode"], base_channels=config["base_channels"]),
    )
    result = train(training_config)
    save_checkpoint(config["out"], result.model, result.schedule)
    window = max(1, len(result.losses) // 10)
    print(f"loss first={result.mean_loss(0, window):.4f} last={result.mean_loss(-window):.4f}", flush=True)
    return EXIT_OK


def cmd_sample(config: Mapping[str, Any]) -> int:
    _require(config, "checkpoint", "out")
    model, schedule = load_checkpoint(config["checkpoint"], config["device"])
    mode = model.config.cond_mode
    seam_fraction = config["seam_fraction"]
    if config["sphere"]:
        height, width = config["h"] or PANORAMA_SHAPE[0], config["w"] or PANORAMA_SHAPE[1]
        pack = sphere_metric_conditioning(height, width) if mode == MODE_METRIC else sphere_positional_pack(height, width, config["sphere_scale"])
        if seam_fraction is None:
            seam_fraction = DEFAULT_SEAM_FRACTION
    else:
        if config.get("field"):
            field = warp_from_file(read_field_file(config["field"]))
        else:
            field = normalized_grid(config["h"] or config["model_res"], config["w"] or config["model_res"])
        pack = build_pack(field, mode, attention_shapes(field.height, field.width))
    if config["no_reweighting"]:
        pack = pack.without_reweighting()
    generator = torch.Generator().manual_seed(config["seed"])
    image = sample(model, pack, config["class_id"], config["steps"], generator, seam_fraction, schedule)
    write_png(config["out"], image)
    return EXIT_OK


def cmd_eval_fidelity(config: Mapping[str, Any]) -> int:
    specs = [PatternSpec(family, config["frequency"]) for family in _families(config["families"])]
    generate = None
    if config.get("checkpoint"):
        model, schedule = load_checkpoint(config["checkpoint"], config["device"])

        def generate(spec: PatternSpec, field: WarpField, seed: int) -> np.ndarray:
            pack = build_pack(field, model.config.cond_mode, attention_shapes(field.height, field.width))
            generator = torch.Generator().manual_seed(seed)
            return sample(model, pack, spec.class_id, config["steps"], generator, None, schedule)

    rows = run_fidelity_study(specs, range(config["seeds"]), config["res"], generate=generate, threads=config["threads"])
    if config.get("displacement_out"):
        for row in rows:
            name = f"{row.spec.family}_k1_{row.k1:g}_seed{row.seed}.cfd"
            write_field_file(Path(config["displacement_out"]) / name, displacement_to_file(row.displacement.values))
    report = format_report(summarize_fidelity(rows))
    print(report, end="", flush=True)
    if config.get("out"):
        Path(config["out"]).parent.mkdir(parents=True, exist_ok=True)
        Path(config["out"]).write_text(report, encoding="utf-8")
    return EXIT_OK


def cmd_selftest(config: Mapping[str, Any]) -> int:
    records = run_selftest(config["cases"], config["seed"])
    print(format_report(records), end="", flush=True)
    return EXIT_OK if all_passed(records) else EXIT_VALIDATION


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _common_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--seed", type=int, default=None, help="Random seed (WARPCOND_SEED).")
    parent.add_argument("--config", type=Path, default=None, help="KEY=VALUE config file; flags override it.")
    parent.add_argument("--threads", type=int, default=None, help="Worker threads (WARPCOND_THREADS).")
    parent.add_argument("--device", default=None, help="Torch device (WARPCOND_DEVICE).")
    parent.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR.")
    return parent


def _add_command(
    subparsers: argparse._SubParsersAction,
    name: str,
    handler: Callable[[Mapping[str, Any]], int],
    defaults: Mapping[str, Any],
    parent: argparse.ArgumentParser,
    help_text: str,
) -> argparse.ArgumentParser:
    parser = subparsers.add_parser(name, parents=[parent], help=help_text)
    parser.set_defaults(handler=handler, defaults=dict(defaults))
    return parser


def _dims(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--h", type=int, default=None, help="Height in pixels.")
    parser.add_argument("--w", type=int, default=None, help="Width in pixels.")


def build_parser() -> argparse.ArgumentParser:
    parent = _common_parent()
    parser = _Parser(prog="warpcond", description="Warp-conditioned diffusion toolkit.")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    field_parser = commands.add_parser("field", help="Emit conditioning fields as FieldFiles.")
    field_kinds = field_parser.add_subparsers(dest="kind", required=True, parser_class=_Parser)

    lens = _add_command(
        field_kinds,
        "lens",
        cmd_field_lens,
        {"h": 64, "w": 64, "preset": None, **dict.fromkeys(LENS_KEYS), "out": None},
        parent,
        "Brown-Conrady lens warp field.",
    )
    _dims(lens)
    lens.add_argument("--preset", choices=sorted(LENS_PRESETS), default=None, help="Start from a named lens; explicit coefficients override it.")
    for name in ("k1", "k2", "p1", "p2", "cx", "cy", "focal-scale"):
        lens.add_argument(f"--{name}", type=float, default=None)
    lens.add_argument("--out", default=None)

    panorama_defaults = {"h": PANORAMA_SHAPE[0], "w": PANORAMA_SHAPE[1], "out": None}
    for name, handler, defaults, text in (
        ("sphere-pos", cmd_field_sphere_pos, {**panorama_defaults, "sphere_scale": POSITIONAL_SCALE}, "Spherical positional field."),
        ("sphere-metric", cmd_field_sphere_metric, panorama_defaults, "Spherical metric (g11, g22, g12, dist)."),
    ):
        kind = _add_command(field_kinds, name, handler, defaults, parent, text)
        _dims(kind)
        if "sphere_scale" in defaults:
            kind.add_argument("--sphere-scale", type=float, default=None, help="Scale of the (alpha sin theta, theta) radians.")
        kind.add_argument("--out", default=None)

    flip = _add_command(field_kinds, "flip", cmd_field_flip, {"h": 64, "w": 64, "axis": AXIS_VERTICAL, "out": None}, parent, "Mirrored identity grid.")
    _dims(flip)
    flip.add_argument("--axis", choices=("horizontal", "vertical"), default=None)
    flip.add_argument("--out", default=None)

    squeeze = _add_command(
        field_kinds, "squeeze", cmd_field_squeeze, {"h": 64, "w": 64, "strength": 1.0, "out": None}, parent, "Corner-squeezed grid."
    )
    _dims(squeeze)
    squeeze.add_argument("--strength", type=float, default=None)
    squeeze.add_argument("--out", default=None)

    io_defaults = {"image": None, "field": None, "out": None, "coverage": None}
    warp = _add_command(commands, "warp", cmd_warp, io_defaults, parent, "Remap a PNG through a warp field.")
    unwarp_cmd = _add_command(commands, "unwarp", cmd_unwarp, {**io_defaults, "h": None, "w": None, "mask": None}, parent, "Invert a warp.")
    for command in (warp, unwarp_cmd):
        command.add_argument("--image", default=None)
        command.add_argument("--field", default=None)
        command.add_argument("--out", default=None)
        command.add_argument("--coverage", default=None, help="Optional PNG for the coverage mask.")
    _dims(unwarp_cmd)
    unwarp_cmd.add_argument("--mask", default=None, help="Coverage PNG of the warped image.")

    for name, handler, text in (("density", cmd_density, "Content density of a warp field."), ("metric", cmd_metric, "Pullback metric of a warp field.")):
        command = _add_command(commands, name, handler, {"field": None, "out": None}, parent, text)
        command.add_argument("--field", default=None)
        command.add_argument("--out", default=None)

    dataset = commands.add_parser("dataset", help="Procedural dataset tools.")
    dataset_actions = dataset.add_subparsers(dest="action", required=True, parser_class=_Parser)
    gen = _add_command(
        dataset_actions,
        "gen",
        cmd_dataset_gen,
        {"count": 16, "progress": 0.0, "model_res": settings.DEFAULT_MODEL_RES, "families": ",".join(FAMILIES), "cond_mode": MODE_POSITIONAL, "out_dir": None},
        parent,
        "Generate and cache training samples.",
    )
    gen.add_argument("--count", type=int, default=None)
    gen.add_argument("--progress", type=float, default=None)
    gen.add_argument("--model-res", type=int, default=None)
    gen.add_argument("--families", default=None)
    gen.add_argument("--cond-mode", choices=(MODE_POSITIONAL, MODE_METRIC), default=None)
    gen.add_argument("--out-dir", default=None)

    train_cmd = _add_command(
        commands,
        "train",
        cmd_train,
        {
            "steps": 2000,
            "batch_size": 16,
            "lr": 2e-4,
            "model_res": settings.DEFAULT_MODEL_RES,
            "families": "stripes-h,stripes-v,checker",
            "cond_mode": MODE_POSITIONAL,
            "base_channels": 32,
            "no_reweighting": False,
            "log_every": 100,
            "out": None,
        },
        parent,
        "Train a denoiser and write a checkpoint.",
    )
    train_cmd.add_argument("--steps", type=int, default=None)
    train_cmd.add_argument("--batch-size", type=int, default=None)
    train_cmd.add_argument("--lr", type=float, default=None)
    train_cmd.add_argument("--model-res", type=int, default=None)
    train_cmd.add_argument("--families", default=None)
    train_cmd.add_argument("--cond-mode", choices=(MODE_POSITIONAL, MODE_METRIC), default=None)
    train_cmd.add_argument("--base-channels", type=int, default=None)
    train_cmd.add_argument("--no-reweighting", action="store_true", default=None)
    train_cmd.add_argument("--log-every", type=int, default=None)
    train_cmd.add_argument("--out", default=None)

    sample_cmd = _add_command(
        commands,
        "sample",
        cmd_sample,
        {
            "checkpoint": None,
            "class_id": 0,
            "field": None,
            "sphere": False,
            "h": None,
            "w": None,
            "model_res": settings.DEFAULT_MODEL_RES,
            "steps": 50,
            "seam_fraction": None,
            "no_reweighting": False,
            "sphere_scale": POSITIONAL_SCALE,
            "out": None,
        },
        parent,
        "Sample an image from a checkpoint.",
    )
    sample_cmd.add_argument("--checkpoint", default=None)
    sample_cmd.add_argument("--class-id", type=int, default=None)
    sample_cmd.add_argument("--field", default=None, help="Warp FieldFile; identity grid if omitted.")
    sample_cmd.add_argument("--sphere", action="store_true", default=None)
    _dims(sample_cmd)
    sample_cmd.add_argument("--model-res", type=int, default=None)
    sample_cmd.add_argument("--steps", type=int, default=None)
    sample_cmd.add_argument("--seam-fraction", type=float, default=None)
    sample_cmd.add_argument("--sphere-scale", type=float, default=None, help="Positional scale for --sphere; match field sphere-pos.")
    sample_cmd.add_argument("--no-reweighting", action="store_true", default=None)
    sample_cmd.add_argument("--out", default=None)

    eval_parser = commands.add_parser("eval", help="Evaluation suites.")
    eval_kinds = eval_parser.add_subparsers(dest="suite", required=True, parser_class=_Parser)
    fidelity = _add_command(
        eval_kinds,
        "fidelity",
        cmd_eval_fidelity,
        {"res": 64, "seeds": 2, "families": "stripes-h,stripes-v", "frequency": 4.0, "checkpoint": None, "steps": 50, "out": None, "displacement_out": None},
        parent,
        "Distortion fidelity study.",
    )
    fidelity.add_argument("--res", type=int, default=None)
    fidelity.add_argument("--seeds", type=int, default=None)
    fidelity.add_argument("--families", default=None)
    fidelity.add_argument("--frequency", type=float, default=None)
    fidelity.add_argument("--checkpoint", default=None, help="Also measure samples from this checkpoint.")
    fidelity.add_argument("--steps", type=int, default=None)
    fidelity.add_argument("--out", default=None)
    fidelity.add_argument("--displacement-out", default=None, help="Directory for the recovered control displacement FieldFiles.")

    selftest_cmd = _add_command(commands, "selftest", cmd_selftest, {"cases": 1000}, parent, "Run numerical self-checks.")
    selftest_cmd.add_argument("--cases", type=int, default=None)
    return parser


def _optional_number(value: Any, kind: type, key: str) -> Any:
    if value is None or isinstance(value, kind):
        return value
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise UsageError(f"--{key.replace('_', '-')}: expected {kind.__name__}, got '{value}'") from None


def resolve_config(args: argparse.Namespace) -> dict[str, Any]:
    flags = {key: value for key, value in vars(args).items() if key not in INTERNAL_KEYS}
    defaults = {**COMMON_DEFAULTS, **args.defaults}
    config = settings.merge_config(flags, settings.load_config_file(args.config), defaults)
    config["seed"] = settings.resolve_seed(config["seed"])
    config["threads"] = settings.resolve_threads(config["threads"])
    config["device"] = settings.resolve_device(config["device"])
    config["log_level"] = settings.resolve_log_level(config["log_level"])
    if "model_res" in config:
        config["model_res"] = settings.resolve_model_res(config["model_res"])
    for key in OPTIONAL_INT_KEYS & config.keys():
        config[key] = _optional_number(config[key], int, key)
    for key in OPTIONAL_FLOAT_KEYS & config.keys():
        config[key] = _optional_number(config[key], float, key)
    return config


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    try:
        args = build_parser().parse_args(argv)
        config = resolve_config(args)
        settings.configure_logging(config["log_level"])
        torch.set_num_threads(config["threads"])
        command = " ".join(part for part in (args.command, getattr(args, "kind", None), getattr(args, "action", None), getattr(args, "suite", None)) if part)
        print(settings.format_resolved_config({"command": command, **config}), flush=True)
        return args.handler(config)
    except ValueError as exc:
        print(f"ERROR: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"ERROR: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
