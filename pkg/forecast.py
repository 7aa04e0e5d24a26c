"""
Track Forecasting Module.

Single-step next-cell prediction from a 12-step history, autoregressive
rollouts, a persistence baseline and trajectory export to GeoJSON or CSV.
"""

import asyncio
import csv
import io
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from config import settings
from dataset_builder import Normalizer
from errors import BearingUndefinedError, ExportError
from geo_features import bearing, destination_point, great_circle_distance, grid_center, grid_id
from models import ForecastStep, GeoPoint, GridSpec, StepFeatures, Trajectory, WindowSample
from trainer import Checkpoint, round_half_up
from transformer_model import forward
from utils import atomic_write

logger = logging.getLogger(__name__)


def _normalized_window(
    checkpoint: Checkpoint, history: Sequence[StepFeatures], strict: bool = True
) -> np.ndarray:
    seq_len = checkpoint.config.seq_len
    if len(history) < seq_len:
        raise ValueError(f"history has {len(history)} steps, need {seq_len}")
    raw = np.array([s.as_row() for s in history[-seq_len:]], dtype=np.float64)
    window = checkpoint.normalizer.transform(raw)
    limit = settings.clamp_limit
    if np.abs(window).max() > limit:
        if strict:
            raise ValueError(
                f"history features fall outside the normalizer range (|x| > {limit})"
            )
        window = np.clip(window, -limit, limit)
    return window


def _to_cell(value: float, normalizer: Normalizer, grid: GridSpec) -> int:
    cell = int(round_half_up(normalizer.inverse_label(value)))
    return min(max(cell, 0), grid.cell_count - 1)


def predict_next(
    checkpoint: Checkpoint,
    history: Sequence[StepFeatures],
    step_index: int = 1,
    strict: bool = True,
) -> ForecastStep:
    """
    Predict the cell of the next fix from the last ``seq_len`` steps.

    The network output is denormalized, rounded and clamped onto the grid.

    Raises:
        ValueError: If the history is too short or outside the range the
            normalizer can represent. With ``strict=False`` such values
            are clamped instead.
    """
    window = _normalized_window(checkpoint, history, strict)
    cell = _to_cell(forward(checkpoint.params, window), checkpoint.normalizer, checkpoint.grid)
    return ForecastStep(step_index, cell, grid_center(cell, checkpoint.grid))


def rollout(
    checkpoint: Checkpoint,
    history: Sequence[StepFeatures],
    n_steps: int,
    storm_id: str = "",
    observed: Optional[Sequence[GeoPoint]] = None,
) -> Trajectory:
    """
    Forecast ``n_steps`` fixes by feeding each prediction back in.

    Each new step persists the last observed wind and pressure and takes
    its distance and bearing from the previous cell center to the
    predicted one. When two successive cells coincide the previous bearing
    is carried over and the step is flagged.
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be at least 1, got {n_steps}")

    grid = checkpoint.grid
    steps = list(history)
    _normalized_window(checkpoint, steps)
    last = steps[-1]
    prev_center = grid_center(last.grid_id, grid)
    prev_bearing = last.bearing

    forecast: List[ForecastStep] = []
    max_step = 0.0
    for index in range(1, n_steps + 1):
        # synthesized steps may leave the training range; clamp them
        predicted = predict_next(checkpoint, steps, index, strict=len(steps) == len(history))
        distance = great_circle_distance(prev_center, predicted.center)
        carried = False
        try:
            heading = bearing(prev_center, predicted.center)
        except BearingUndefinedError:
            heading, carried = prev_bearing, True
            logger.debug("%s step %d: same cell twice, bearing carried over", storm_id, index)

        forecast.append(
            ForecastStep(index, predicted.grid_id, predicted.center, bearing_carried=carried)
        )
        steps.append(StepFeatures(last.wind, last.pressure, distance, heading, predicted.grid_id))
        max_step = max(max_step, distance)
        prev_center, prev_bearing = predicted.center, heading

    return Trajectory(
        storm_id=storm_id,
        observed=list(observed or []),
        forecast=forecast,
        metadata={
            "mode": "rollout",
            "intensity": "persisted",
            "max_step_miles": max_step,
            "bearing_carried_steps": [s.step_index for s in forecast if s.bearing_carried],
        },
    )


async def rollout_many(
    checkpoint: Checkpoint,
    histories: Dict[str, Sequence[StepFeatures]],
    n_steps: int,
    concurrency: int = 4,
) -> Dict[str, Trajectory]:
    """
    Run independent rollouts concurrently, at most ``concurrency`` at once.

    Failed rollouts are logged and left out of the result.
    """
    semaphore = asyncio.Semaphore(concurrency)

    async def bounded(storm_id: str, history: Sequence[StepFeatures]) -> Trajectory:
        async with semaphore:
            return await asyncio.to_thread(rollout, checkpoint, history, n_steps, storm_id)

    storm_ids = list(histories)
    results = await asyncio.gather(
        *[bounded(sid, histories[sid]) for sid in storm_ids],
        return_exceptions=True,
    )

    trajectories = {}
    for sid, result in zip(storm_ids, results):
        if isinstance(result, Exception):
            logger.warning("Rollout for %s failed: %s", sid, result)
        else:
            trajectories[sid] = result
    logger.info("Completed %d/%d rollouts", len(trajectories), len(storm_ids))
    return trajectories


def predict_along_track(
    checkpoint: Checkpoint, steps: Sequence[StepFeatures], storm_id: str = ""
) -> Trajectory:
    """
    One-step predictions for every window of an observed step sequence.

    ``step_index`` counts windows from 1; forecast ``k`` predicts the fix
    after the ``k``-th window.
    """
    seq_len = checkpoint.config.seq_len
    forecast = [
        predict_next(checkpoint, steps[end - seq_len:end], end - seq_len + 1, strict=False)
        for end in range(seq_len, len(steps) + 1)
    ]
    return Trajectory(
        storm_id=storm_id,
        observed=[grid_center(s.grid_id, checkpoint.grid) for s in steps],
        forecast=forecast,
        metadata={"mode": "along_track"},
    )


def persistence_baseline(
    history: Sequence[StepFeatures], n_steps: int, grid: GridSpec, storm_id: str = ""
) -> Trajectory:
    """
    Repeat the last observed displacement (distance and bearing) from the
    last observed cell center.
    """
    if not history:
        raise ValueError("persistence baseline needs at least one step")
    last = history[-1]
    position = grid_center(last.grid_id, grid)

    forecast = []
    for index in range(1, n_steps + 1):
        if last.distance > 0:
            position = grid.clamp(destination_point(position, last.distance, last.bearing))
        cell = grid_id(position, grid)
        forecast.append(ForecastStep(index, cell, grid_center(cell, grid)))
    return Trajectory(storm_id=storm_id, forecast=forecast, metadata={"mode": "persistence"})


def persistence_accuracy(
    samples: Sequence[WindowSample], normalizer: Normalizer, grid: GridSpec
) -> float:
    """
    Fraction of windows whose one-step persistence cell equals the label.

    The last row's distance and bearing are the move to the labelled fix,
    so the repeated displacement is taken from the row before it.
    """
    if not samples:
        raise ValueError("cannot score the baseline on zero windows")
    hits = 0
    for sample in samples:
        raw = normalizer.inverse(sample.inputs) if sample.normalized else sample.inputs
        last, previous = StepFeatures.from_row(raw[-1]), StepFeatures.from_row(raw[-2])
        # clamped inputs can invert to an id just off the grid
        cell = min(max(last.grid_id, 0), grid.cell_count - 1)
        history = [StepFeatures(last.wind, last.pressure, previous.distance, previous.bearing, cell)]
        predicted = persistence_baseline(history, 1, grid).forecast[0]
        hits += predicted.grid_id == sample.raw_label
    return hits / len(samples)


def trajectory_geojson(trajectory: Trajectory) -> dict:
    """GeoJSON FeatureCollection: observed line, forecast line, forecast points."""
    features = []
    if trajectory.observed:
        features.append(
            {
                "type": "Feature",
                "geometry": {
                    "type": "LineString",
                    "coordinates": [[p.lon, p.lat] for p in trajectory.observed],
                },
                "properties": {"kind": "observed", "storm_id": trajectory.storm_id},
            }
        )
    if trajectory.forecast:
        features.append(
            {
                "type": "Feature",
                "geometry": {
                    "type": "LineString",
                    "coordinates": [[s.center.lon, s.center.lat] for s in trajectory.forecast],
                },
                "properties": {"kind": "forecast", "storm_id": trajectory.storm_id},
            }
        )
        for step in trajectory.forecast:
            features.append(
                {
                    "type": "Feature",
                    "geometry": {"type": "Point", "coordinates": [step.center.lon, step.center.lat]},
                    "properties": {"step_index": step.step_index, "grid_id": step.grid_id},
                }
            )
    return {
        "type": "FeatureCollection",
        "features": features,
        "properties": {"storm_id": trajectory.storm_id, **trajectory.metadata},
    }


def trajectory_csv(trajectory: Trajectory, grid: Optional[GridSpec] = None) -> str:
    """CSV with columns kind, step, lat, lon, grid_id (grid_id blank if unknown)."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["kind", "step", "lat", "lon", "grid_id"])
    for i, p in enumerate(trajectory.observed):
        cell = grid_id(p, grid) if grid is not None and grid.contains(p) else ""
        writer.writerow(["observed", i, repr(p.lat), repr(p.lon), cell])
    for s in trajectory.forecast:
        writer.writerow(["forecast", s.step_index, repr(s.center.lat), repr(s.center.lon), s.grid_id])
    return buffer.getvalue()


def export_trajectory(
    trajectory: Trajectory,
    path: Union[str, Path],
    fmt: str = "geojson",
    grid: Optional[GridSpec] = None,
) -> Path:
    """
    Write a trajectory as ``geojson`` or ``csv``.

    Raises:
        ValueError: On an unknown format.
        ExportError: If the file cannot be written.
    """
    if fmt == "geojson":
        payload = json.dumps(trajectory_geojson(trajectory), indent=2).encode()
    elif fmt == "csv":
        payload = trajectory_csv(trajectory, grid).encode()
    else:
        raise ValueError(f"Unsupported export format: {fmt}")

    target = Path(path)
    try:
        atomic_write(target, payload)
    except OSError as e:
        raise ExportError(f"cannot write {target}: {e}") from e
    logger.info("Exported %s trajectory for %s to %s", fmt, trajectory.storm_id or "storm", target)
    return target
