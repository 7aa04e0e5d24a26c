"""
Dataset Builder Module.

Turns filtered storm tracks into per-step features, zero-padded
sequences, 12-step windows, a min-max normalizer and a storm-level
train/test split. Also reads and writes the binary dataset cache.
"""

import json
import logging
import struct
import zlib
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import settings
from errors import BearingUndefinedError, ChecksumError, CheckpointError, TruncatedFileError
from geo_features import grid_id, motion
from models import (
    FEATURE_NAMES,
    GridSpec,
    StepFeatures,
    StormHeader,
    StormTrack,
    TrackPoint,
    WindowSample,
)
from utils import atomic_write, write_json

logger = logging.getLogger(__name__)

PAD_LENGTH = 100
WINDOW = 12
HORIZON = 1


def derive_steps(track: StormTrack, spec: GridSpec) -> List[StepFeatures]:
    """
    Compute the five model features for every fix that has a successor.

    Raises:
        ValueError: If the track has fewer than two fixes.
        BearingUndefinedError: If two consecutive fixes share a position.
    """
    points = track.points
    if len(points) < 2:
        raise ValueError(f"storm {track.storm_id} needs at least 2 fixes, has {len(points)}")

    steps = []
    for i, (here, there) in enumerate(zip(points, points[1:])):
        try:
            move = motion(here.position, there.position)
        except BearingUndefinedError:
            raise BearingUndefinedError(
                f"storm {track.storm_id}: fixes {i} and {i + 1} share position "
                f"({here.latitude}, {here.longitude})"
            ) from None
        steps.append(
            StepFeatures(
                wind=float(here.max_wind),
                pressure=float(here.min_pressure),
                distance=move.distance,
                bearing=move.bearing,
                grid_id=grid_id(here.position, spec),
            )
        )
    return steps


def steps_to_matrix(steps: Sequence[StepFeatures]) -> np.ndarray:
    """Stack step features as a ``len(steps) x 5`` float matrix."""
    if not steps:
        return np.zeros((0, len(FEATURE_NAMES)))
    return np.array([s.as_row() for s in steps], dtype=np.float64)


def pad_track(
    steps: Sequence[StepFeatures], target_len: int = PAD_LENGTH
) -> Tuple[np.ndarray, int]:
    """
    Zero-pad a step sequence at the end to ``target_len`` rows.

    Returns:
        ``(padded, valid_len)`` where ``padded`` is ``target_len x 5``.

    Raises:
        ValueError: If the sequence is longer than ``target_len``.
    """
    valid_len = len(steps)
    if valid_len > target_len:
        raise ValueError(f"sequence of {valid_len} steps exceeds pad length {target_len}")
    padded = np.zeros((target_len, len(FEATURE_NAMES)))
    padded[:valid_len] = steps_to_matrix(steps)
    return padded, valid_len


def make_windows(
    padded: np.ndarray,
    valid_len: int,
    storm_id: str = "",
    window: int = WINDOW,
    horizon: int = HORIZON,
) -> List[WindowSample]:
    """
    Slide a ``window``-row input block over the real rows of a padded
    sequence; the label is the grid id ``horizon`` rows after the block.

    Padding rows are never used as inputs or labels.
    """
    if valid_len > len(padded):
        raise ValueError(f"valid_len {valid_len} exceeds sequence length {len(padded)}")

    label_col = FEATURE_NAMES.index("grid_id")
    samples = []
    for start in range(0, valid_len - window - horizon + 1):
        raw_label = int(round(padded[start + window + horizon - 1, label_col]))
        samples.append(
            WindowSample(
                storm_id=storm_id,
                inputs=padded[start:start + window].copy(),
                label=float(raw_label),
                raw_label=raw_label,
            )
        )
    return samples


@dataclass(frozen=True)
class Normalizer:
    """
    Per-feature affine map of ``[min, max]`` onto ``[-1, 1]``.

    Input features are fitted on the training windows; the label range is
    the full grid-id range so every cell is representable.
    """

    feature_min: Tuple[float, ...]
    feature_max: Tuple[float, ...]
    label_min: float
    label_max: float

    def __post_init__(self):
        for name, lo, hi in zip(FEATURE_NAMES, self.feature_min, self.feature_max):
            if not hi > lo:
                raise ValueError(f"feature {name!r} is degenerate: min {lo} >= max {hi}")
        if not self.label_max > self.label_min:
            raise ValueError(f"label range [{self.label_min}, {self.label_max}] is degenerate")

    @property
    def _lo(self) -> np.ndarray:
        return np.asarray(self.feature_min)

    @property
    def _hi(self) -> np.ndarray:
        return np.asarray(self.feature_max)

    def transform(self, values: np.ndarray) -> np.ndarray:
        return 2.0 * (np.asarray(values, dtype=np.float64) - self._lo) / (self._hi - self._lo) - 1.0

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) + 1.0) * (self._hi - self._lo) / 2.0 + self._lo

    def transform_label(self, value):
        return 2.0 * (np.asarray(value, dtype=np.float64) - self.label_min) / (
            self.label_max - self.label_min
        ) - 1.0

    def inverse_label(self, value):
        return (np.asarray(value, dtype=np.float64) + 1.0) * (
            self.label_max - self.label_min
        ) / 2.0 + self.label_min

    def to_dict(self) -> dict:
        return {
            "feature_names": list(FEATURE_NAMES),
            "feature_min": list(self.feature_min),
            "feature_max": list(self.feature_max),
            "label_min": self.label_min,
            "label_max": self.label_max,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Normalizer":
        return cls(
            feature_min=tuple(data["feature_min"]),
            feature_max=tuple(data["feature_max"]),
            label_min=float(data["label_min"]),
            label_max=float(data["label_max"]),
        )


def fit_normalizer(train_windows: Sequence[WindowSample], spec: GridSpec) -> Normalizer:
    """
    Fit per-feature min/max on raw training windows.

    Raises:
        ValueError: On an empty training set or a constant feature.
    """
    if not train_windows:
        raise ValueError("cannot fit a normalizer on an empty training set")
    stacked = np.concatenate([w.inputs for w in train_windows], axis=0)
    normalizer = Normalizer(
        feature_min=tuple(float(v) for v in stacked.min(axis=0)),
        feature_max=tuple(float(v) for v in stacked.max(axis=0)),
        label_min=0.0,
        label_max=float(spec.cell_count - 1),
    )
    logger.info("Fitted normalizer on %d training windows", len(train_windows))
    return normalizer


def apply_normalizer(
    sample: WindowSample, normalizer: Normalizer, clamp_limit: Optional[float] = None
) -> WindowSample:
    """
    Map a raw window onto the normalized scale.

    Inputs outside ``[-clamp_limit, clamp_limit]`` (test windows beyond the
    training range) are clamped.
    """
    if sample.normalized:
        return sample
    limit = settings.clamp_limit if clamp_limit is None else clamp_limit
    inputs = normalizer.transform(sample.inputs)
    if np.abs(inputs).max() > limit:
        logger.debug("Clamped window of %s into +-%.2f", sample.storm_id, limit)
        inputs = np.clip(inputs, -limit, limit)
    return replace(
        sample,
        inputs=inputs,
        label=float(normalizer.transform_label(sample.raw_label)),
        normalized=True,
    )


def normalize_windows(
    samples: Sequence[WindowSample], normalizer: Normalizer, clamp_limit: Optional[float] = None
) -> List[WindowSample]:
    """Normalize a window set and log how many needed clamping."""
    limit = settings.clamp_limit if clamp_limit is None else clamp_limit
    clamped = sum(
        1 for s in samples if not s.normalized and np.abs(normalizer.transform(s.inputs)).max() > limit
    )
    if clamped:
        logger.warning("%d of %d windows had inputs clamped to +-%.2f", clamped, len(samples), limit)
    return [apply_normalizer(s, normalizer, limit) for s in samples]


@dataclass
class SplitDataset:
    """Train and test windows with no storm on both sides."""

    train: List[WindowSample]
    test: List[WindowSample]
    seed: int
    train_storms: List[str] = field(default_factory=list)
    test_storms: List[str] = field(default_factory=list)

    @property
    def train_fraction(self) -> float:
        total = len(self.train) + len(self.test)
        return len(self.train) / total if total else 0.0


def split_by_storm(
    grouped: Dict[str, List[WindowSample]], ratio: float = 0.85, seed: int = 0
) -> SplitDataset:
    """
    Shuffle storms with ``seed`` and assign them greedily so the train
    side holds about ``ratio`` of all windows.

    Raises:
        ValueError: If fewer than two storms are given.
    """
    if len(grouped) < 2:
        raise ValueError(f"need at least 2 storms to split, got {len(grouped)}")

    storm_ids = sorted(grouped)
    order = np.random.default_rng(seed).permutation(len(storm_ids))
    total = sum(len(grouped[s]) for s in storm_ids)
    target = ratio * total

    train_ids, test_ids = [], []
    train_count = 0
    for idx in order:
        sid = storm_ids[idx]
        n = len(grouped[sid])
        if abs(train_count + n - target) < abs(train_count - target):
            train_ids.append(sid)
            train_count += n
        else:
            test_ids.append(sid)

    if not test_ids:
        test_ids.append(train_ids.pop())
    if not train_ids:
        train_ids.append(test_ids.pop(0))

    split = SplitDataset(
        train=[w for sid in train_ids for w in grouped[sid]],
        test=[w for sid in test_ids for w in grouped[sid]],
        seed=seed,
        train_storms=train_ids,
        test_storms=test_ids,
    )
    logger.info(
        "Split %d storms into %d train / %d test (%.3f of windows in train)",
        len(storm_ids),
        len(train_ids),
        len(test_ids),
        split.train_fraction,
    )
    return split


def build_steps(
    tracks: Sequence[StormTrack], spec: GridSpec
) -> Dict[str, List[StepFeatures]]:
    """Derive steps for every track, skipping storms with an undefined bearing."""
    steps_by_storm: Dict[str, List[StepFeatures]] = {}
    for track in tracks:
        try:
            steps_by_storm[track.storm_id] = derive_steps(track, spec)
        except BearingUndefinedError as e:
            logger.warning("Skipping storm: %s", e)
    return steps_by_storm


def build_windows(
    steps_by_storm: Dict[str, List[StepFeatures]],
    pad_length: int = PAD_LENGTH,
    window: int = WINDOW,
    horizon: int = HORIZON,
) -> Dict[str, List[WindowSample]]:
    """
    Pad each storm and cut its windows, keyed by storm id.

    Storms with more steps than ``pad_length`` are skipped with a warning.
    """
    grouped = {}
    for storm_id, steps in steps_by_storm.items():
        if len(steps) > pad_length:
            logger.warning(
                "Skipping storm %s: %d steps exceed pad length %d", storm_id, len(steps), pad_length
            )
            continue
        padded, valid_len = pad_track(steps, pad_length)
        grouped[storm_id] = make_windows(padded, valid_len, storm_id, window, horizon)
    logger.info(
        "Built %d windows from %d storms",
        sum(len(w) for w in grouped.values()),
        len(grouped),
    )
    return grouped


def max_step_distance(steps_by_storm: Dict[str, List[StepFeatures]]) -> float:
    """Largest observed 6-hour displacement in miles."""
    return max((s.distance for steps in steps_by_storm.values() for s in steps), default=0.0)


# Dataset cache layout (little-endian):
#   b"CGF1" | u32 storm count | storm table: (u32 len + utf-8 id, u32 len + utf-8 name,
#   u32 n_points) per storm | per storm: n_points x 5 f64 matrix
#   [seconds since 1970-01-01 UTC, lat, lon, wind, pressure] followed by
#   n_points 2-byte status codes | u32 CRC32 of everything before it.
CACHE_MAGIC = b"CGF1"
_U32 = struct.Struct("<I")
_CACHE_COLUMNS = 5
_EPOCH = datetime(1970, 1, 1)


def _pack_text(text: str) -> bytes:
    data = text.encode("utf-8")
    return _U32.pack(len(data)) + data


def write_cache(
    path: Union[str, Path],
    tracks: Sequence[StormTrack],
    spec: GridSpec,
    normalizer: Optional[Normalizer] = None,
    extra: Optional[dict] = None,
) -> Path:
    """
    Write filtered tracks to the binary cache plus a JSON sidecar holding
    the grid, the normalizer (once fitted) and any extra metadata.

    Returns:
        Path of the sidecar file.
    """
    parts = [CACHE_MAGIC, _U32.pack(len(tracks))]
    for track in tracks:
        h = track.header
        parts += [_pack_text(h.storm_id), _pack_text(h.name), _U32.pack(len(track.points))]
    for track in tracks:
        matrix = np.array(
            [
                [
                    (p.timestamp - _EPOCH).total_seconds(),
                    p.latitude,
                    p.longitude,
                    p.max_wind,
                    p.min_pressure,
                ]
                for p in track.points
            ],
            dtype="<f8",
        ).reshape(-1, _CACHE_COLUMNS)
        parts.append(matrix.tobytes())
        parts.append(b"".join(p.status[:2].ljust(2).encode("ascii") for p in track.points))
    body = b"".join(parts)
    atomic_write(path, body + _U32.pack(zlib.crc32(body)))

    sidecar = Path(f"{path}.json")
    write_json(
        sidecar,
        {
            "format": CACHE_MAGIC.decode(),
            "grid": spec.to_dict(),
            "normalizer": normalizer.to_dict() if normalizer else None,
            **(extra or {}),
        },
    )
    logger.info("Wrote dataset cache %s (%d storms)", path, len(tracks))
    return sidecar


def read_cache(
    path: Union[str, Path]
) -> Tuple[List[StormTrack], GridSpec, Optional[Normalizer], dict]:
    """
    Read a cache written by ``write_cache``.

    Returns:
        ``(tracks, grid, normalizer or None, sidecar dict)``.

    Raises:
        CheckpointError: On a wrong magic, truncation or CRC mismatch.
    """
    blob = Path(path).read_bytes()
    if len(blob) < len(CACHE_MAGIC) + 2 * _U32.size:
        raise TruncatedFileError(f"{path}: cache file is truncated")
    if blob[:4] != CACHE_MAGIC:
        raise CheckpointError(f"{path}: not a dataset cache (magic {blob[:4]!r})")
    body, (crc,) = blob[:-4], _U32.unpack(blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"{path}: cache checksum mismatch")

    offset = 4

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(body):
            raise TruncatedFileError(f"{path}: cache file is truncated")
        chunk = body[offset:offset + n]
        offset += n
        return chunk

    def take_u32() -> int:
        return _U32.unpack(take(_U32.size))[0]

    def take_text() -> str:
        return take(take_u32()).decode("utf-8")

    table = []
    for _ in range(take_u32()):
        storm_id, name = take_text(), take_text()
        table.append((storm_id, name, take_u32()))

    tracks = []
    for storm_id, name, n_points in table:
        matrix = np.frombuffer(take(n_points * _CACHE_COLUMNS * 8), dtype="<f8")
        matrix = matrix.reshape(n_points, _CACHE_COLUMNS)
        statuses = take(2 * n_points).decode("ascii")
        points = tuple(
            TrackPoint(
                timestamp=_EPOCH + timedelta(seconds=float(row[0])),
                status=statuses[2 * i:2 * i + 2].strip(),
                latitude=float(row[1]),
                longitude=float(row[2]),
                max_wind=int(row[3]),
                min_pressure=int(row[4]),
            )
            for i, row in enumerate(matrix)
        )
        header = StormHeader(storm_id[:2], int(storm_id[2:4]), int(storm_id[4:]), name, n_points)
        tracks.append(StormTrack(header, points))

    with open(f"{path}.json", "r") as f:
        sidecar = json.load(f)
    normalizer = Normalizer.from_dict(sidecar["normalizer"]) if sidecar.get("normalizer") else None
    return tracks, GridSpec.from_dict(sidecar["grid"]), normalizer, sidecar


@dataclass
class PreparedDataset:
    """Everything training and evaluation read from one set of tracks."""

    steps_by_storm: Dict[str, List[StepFeatures]]
    split: SplitDataset
    normalizer: Normalizer
    train: List[WindowSample]
    test: List[WindowSample]
    max_step_miles: float
    # storms longer than the pad length, left out of the windows
    too_long: List[str] = field(default_factory=list)


def prepare_dataset(
    tracks: Sequence[StormTrack],
    spec: GridSpec,
    pad_length: int = PAD_LENGTH,
    window: int = WINDOW,
    horizon: int = HORIZON,
    ratio: float = 0.85,
    seed: int = 0,
) -> PreparedDataset:
    """Steps, windows, storm split and a normalizer fitted on the train side."""
    steps_by_storm = build_steps(tracks, spec)
    grouped = build_windows(steps_by_storm, pad_length, window, horizon)
    grouped = {sid: windows for sid, windows in grouped.items() if windows}
    split = split_by_storm(grouped, ratio, seed)
    normalizer = fit_normalizer(split.train, spec)
    return PreparedDataset(
        steps_by_storm=steps_by_storm,
        split=split,
        normalizer=normalizer,
        train=normalize_windows(split.train, normalizer),
        test=normalize_windows(split.test, normalizer),
        max_step_miles=max_step_distance(steps_by_storm),
        too_long=sorted(sid for sid, steps in steps_by_storm.items() if len(steps) > pad_length),
    )
