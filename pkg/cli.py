"""
Command-Line Interface for the Cyclone Grid Forecaster.

Sub-commands wire the pipeline together: fetch the archive, ingest it
into a dataset cache, train a checkpoint, evaluate it and export
forecast trajectories.

Exit codes: 0 success, 2 input error, 3 numeric failure.
"""

import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from pydantic import ValidationError

from config import PipelineConfig, settings
from dataset_builder import (
    build_steps,
    derive_steps,
    max_step_distance,
    prepare_dataset,
    read_cache,
    write_cache,
)
from errors import CycloneGridError, DivergenceError, NumericalError
from forecast import (
    export_trajectory,
    persistence_accuracy,
    predict_along_track,
    rollout,
    rollout_many,
)
from geo_features import fit_grid
from hurdat_fetcher import HurdatFetcher
from hurdat_ingest import dataset_summary, filter_tracks_with_report, load_hurdat2
from models import GridSpec
from trainer import evaluate, load_checkpoint, save_checkpoint, train
from utils import setup_logging, write_json

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3

CACHE_NAME = "dataset.cgf"
SUMMARY_NAME = "summary.json"
CHECKPOINT_NAME = "checkpoint.cgf"
TRAIN_LOG_NAME = "train_log.jsonl"
METRICS_NAME = "metrics.json"

# Reference counts for the cleaned 1944-2022 Atlantic archive
REFERENCE_STORMS = 982
REFERENCE_POINTS = 22545
REFERENCE_CELLS = 23533
SOFT_TOLERANCE = 0.02

ROLLOUT_STORMS = 20
ROLLOUT_STEPS = 8


class InputError(CycloneGridError, ValueError):
    """Bad command-line input (missing file, unknown storm)."""


def load_config(args: argparse.Namespace) -> PipelineConfig:
    """Config file (if any), then flag overrides, then the CGF_SEED override."""
    config = PipelineConfig.from_file(args.config) if getattr(args, "config", None) else PipelineConfig()
    updates = {}
    if getattr(args, "data", None):
        updates["data_path"] = args.data
    if getattr(args, "out", None):
        updates["output_dir"] = args.out
    if getattr(args, "min_year", None) is not None or getattr(args, "max_year", None) is not None:
        updates["year_range"] = (
            args.min_year if args.min_year is not None else config.year_range[0],
            args.max_year if args.max_year is not None else config.year_range[1],
        )
    if getattr(args, "resolution", None) is not None:
        updates["resolution"] = args.resolution
    train_updates = {}
    if getattr(args, "epochs", None) is not None:
        train_updates["epochs"] = args.epochs
    if getattr(args, "lr", None) is not None:
        train_updates["learning_rate"] = args.lr
    if getattr(args, "batch_size", None) is not None:
        train_updates["batch_size"] = args.batch_size
    if train_updates:
        updates["train"] = config.train.model_copy(update=train_updates).model_dump()
    if updates:
        config = PipelineConfig.model_validate({**config.model_dump(), **updates})

    seed = getattr(args, "seed", None)
    if seed is None:
        seed = settings.seed_override
    return config.with_seed(seed)


def _require_file(path: Optional[str], what: str) -> Path:
    if not path:
        raise InputError(f"no {what} given")
    target = Path(path)
    if not target.is_file():
        raise InputError(f"{what} not found: {target}")
    return target


def _check_soft_target(label: str, actual: int, reference: int) -> bool:
    within = abs(actual - reference) <= SOFT_TOLERANCE * reference
    if not within:
        logger.warning(
            "%s = %d deviates from reference %d by %.1f%%",
            label,
            actual,
            reference,
            100.0 * (actual - reference) / reference,
        )
    return within


def cmd_fetch(args: argparse.Namespace) -> int:
    """Download the best-track archive."""
    fetcher = HurdatFetcher(url=args.url)
    result = asyncio.run(fetcher.download(args.out))
    print(f"{result.bytes_written} bytes -> {result.path}")
    return EXIT_OK


def cmd_ingest(args: argparse.Namespace) -> int:
    """Parse, filter and cache the archive, then write a JSON summary."""
    config = load_config(args)
    data = _require_file(config.data_path, "data file")
    out = config.output_path

    tracks = load_hurdat2(str(data))
    kept, report = filter_tracks_with_report(tracks, *config.year_range)
    if not kept:
        raise InputError(f"no storms left after filtering {data}")
    grid = fit_grid((p.position for t in kept for p in t.points), config.resolution)
    summary = dataset_summary(kept)
    max_step = max_step_distance(build_steps(kept, grid))

    for label, actual, reference in (
        ("storms", summary.storms, REFERENCE_STORMS),
        ("points", summary.points, REFERENCE_POINTS),
    ):
        if not _check_soft_target(label, actual, reference):
            logger.warning("Filter rule counts: %s", report.to_dict())
    logger.info("Grid has %d cells (reference %d)", grid.cell_count, REFERENCE_CELLS)

    payload = {
        "storms": summary.storms,
        "points": summary.points,
        "years": [summary.min_year, summary.max_year],
        "max_len": summary.max_track_length,
        "cells": grid.cell_count,
        "grid": grid.to_dict(),
        "filter": report.to_dict(),
        "max_step_miles": max_step,
    }
    write_cache(out / CACHE_NAME, kept, grid, extra={"summary": payload, "max_step_miles": max_step})
    write_json(out / SUMMARY_NAME, payload)
    print(f"{summary.storms} storms, {summary.points} points -> {out / SUMMARY_NAME}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    """Train on the cached dataset and write checkpoint + training log."""
    config = load_config(args)
    out = config.output_path
    cache = _require_file(args.cache or str(out / CACHE_NAME), "dataset cache")
    tracks, grid, _, _ = read_cache(cache)

    dataset = prepare_dataset(
        tracks,
        grid,
        config.pad_length,
        config.window,
        config.horizon,
        config.split_ratio,
        config.split_seed,
    )

    def score(params):
        return evaluate(params, dataset.test, dataset.normalizer, grid)

    log_path = out / TRAIN_LOG_NAME
    out.mkdir(parents=True, exist_ok=True)
    log_path.write_text("")
    metadata = {
        "pipeline": config.model_dump(mode="json"),
        "cache": str(cache),
        "train_storms": dataset.split.train_storms,
        "test_storms": dataset.split.test_storms,
        "max_step_miles": dataset.max_step_miles,
        "too_long_storms": dataset.too_long,
    }

    try:
        result = train(
            config.model,
            dataset.train,
            config.train,
            evaluator=score,
            log_path=log_path,
            normalizer=dataset.normalizer,
            grid=grid,
        )
    except DivergenceError as e:
        if e.last_good is not None:
            save_checkpoint(
                out / CHECKPOINT_NAME,
                e.last_good,
                dataset.normalizer,
                grid,
                {**metadata, "diverged_epoch": e.epoch},
            )
        raise

    metrics = score(result.params)
    metadata.update(
        {
            "loss_curve": result.loss_curve,
            "train_accuracy_curve": result.train_accuracy_curve,
            "test_metrics": metrics.to_dict(),
        }
    )
    save_checkpoint(out / CHECKPOINT_NAME, result.params, dataset.normalizer, grid, metadata)
    print(f"test mse={metrics.mse:.6f} accuracy={metrics.accuracy:.4f} -> {out / CHECKPOINT_NAME}")
    return EXIT_OK


def _load_for_checkpoint(args: argparse.Namespace):
    ckpt_path = _require_file(args.checkpoint, "checkpoint")
    checkpoint = load_checkpoint(ckpt_path)
    cache_path = args.cache or checkpoint.metadata.get("cache") or str(ckpt_path.parent / CACHE_NAME)
    cache = _require_file(cache_path, "dataset cache")
    tracks, _, _, _ = read_cache(cache)
    return ckpt_path, checkpoint, tracks


def cmd_evaluate(args: argparse.Namespace) -> int:
    """Score a checkpoint on its held-out storms and write metrics.json."""
    ckpt_path, checkpoint, tracks = _load_for_checkpoint(args)
    pipeline = PipelineConfig.model_validate(checkpoint.metadata.get("pipeline", {}))
    grid = checkpoint.grid

    dataset = prepare_dataset(
        tracks,
        grid,
        pipeline.pad_length,
        pipeline.window,
        pipeline.horizon,
        pipeline.split_ratio,
        pipeline.split_seed,
    )
    test_metrics = evaluate(checkpoint.params, dataset.test, checkpoint.normalizer, grid)
    train_metrics = evaluate(checkpoint.params, dataset.train, checkpoint.normalizer, grid)
    baseline = persistence_accuracy(dataset.test, checkpoint.normalizer, grid)

    seq_len = checkpoint.config.seq_len
    histories = {
        sid: dataset.steps_by_storm[sid][:seq_len]
        for sid in dataset.split.test_storms[:ROLLOUT_STORMS]
    }
    trajectories = asyncio.run(rollout_many(checkpoint, histories, ROLLOUT_STEPS))
    cap = checkpoint.metadata.get("max_step_miles", dataset.max_step_miles)
    worst = max((t.metadata["max_step_miles"] for t in trajectories.values()), default=0.0)

    payload = {
        "mse": test_metrics.mse,
        "accuracy": test_metrics.accuracy,
        "accuracy_within_1": test_metrics.accuracy_within_1,
        "baseline_accuracy": baseline,
        "n_samples": test_metrics.n_samples,
        "train_accuracy": train_metrics.accuracy,
        "rollout": {
            "storms": len(trajectories),
            "steps": ROLLOUT_STEPS,
            "max_step_miles": worst,
            "displacement_cap_miles": cap,
            "within_cap": worst <= cap,
        },
    }
    out = Path(args.out) if args.out else ckpt_path.parent
    write_json(out / METRICS_NAME, payload)
    print(
        f"mse={test_metrics.mse:.6f} accuracy={test_metrics.accuracy:.4f} "
        f"baseline={baseline:.4f} -> {out / METRICS_NAME}"
    )
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    """Forecast one storm and export its trajectory."""
    ckpt_path, checkpoint, tracks = _load_for_checkpoint(args)
    grid: GridSpec = checkpoint.grid
    by_id = {t.storm_id: t for t in tracks}
    track = by_id.get(args.storm_id)
    if track is None:
        raise InputError(
            f"unknown storm id {args.storm_id}; available: {', '.join(sorted(by_id))}"
        )

    steps = derive_steps(track, grid)
    seq_len = checkpoint.config.seq_len
    observed = [p.position for p in track.points]
    if args.mode == "track":
        trajectory = predict_along_track(checkpoint, steps, track.storm_id)
        trajectory.observed = observed
    else:
        start = args.start if args.start is not None else max(0, (len(steps) - seq_len) // 2)
        history = steps[start:start + seq_len]
        if len(history) < seq_len:
            raise InputError(
                f"{track.storm_id} has {len(steps)} steps; need {seq_len} from offset {start}"
            )
        trajectory = rollout(checkpoint, history, args.steps, track.storm_id, observed)
        trajectory.metadata["history_start"] = start

    out = Path(args.out) if args.out else ckpt_path.parent
    suffix = "geojson" if args.format == "geojson" else "csv"
    target = export_trajectory(trajectory, out / f"trajectory.{suffix}", args.format, grid)
    print(f"{len(trajectory.forecast)} forecast steps -> {target}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cyclone-grid",
        description="Grid-cell tropical cyclone track forecaster",
    )
    parser.add_argument("--log-level", default=settings.log_level)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fetch", help="download the HURDAT2 archive")
    p.add_argument("--url", default=None)
    p.add_argument("--out", required=True, help="destination file")
    p.set_defaults(func=cmd_fetch)

    p = sub.add_parser("ingest", help="parse, filter and cache a HURDAT2 file")
    p.add_argument("--data", help="HURDAT2 text file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--config", help="JSON pipeline config")
    p.add_argument("--min-year", type=int)
    p.add_argument("--max-year", type=int)
    p.add_argument("--resolution", type=float)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train a checkpoint on the cached dataset")
    p.add_argument("--config", help="JSON pipeline config")
    p.add_argument("--cache", help="dataset cache (default: <out>/dataset.cgf)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on its test storms")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cache")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="forecast one storm and export it")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--storm-id", required=True)
    p.add_argument("--steps", type=int, default=4)
    p.add_argument("--format", choices=("geojson", "csv"), default="geojson")
    p.add_argument("--mode", choices=("rollout", "track"), default="rollout")
    p.add_argument("--start", type=int, help="first history step (default: mid-track)")
    p.add_argument("--cache")
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level, settings.log_file or None)

    try:
        return args.func(args)
    except NumericalError as e:
        logger.error("Numeric failure: %s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, ValueError, OSError) as e:
        logger.error("Input error: %s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
