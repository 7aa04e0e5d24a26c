"""
Training, Evaluation and Checkpointing.

Adam over minibatches of normalized windows with an MSE loss, scoring
by exact and within-one grid-cell accuracy, and the checkpoint file that
bundles parameters with the config, normalizer and grid they need.
"""

import hashlib
import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

import nn_core as nn
from config import ModelConfig, TrainConfig
from dataset_builder import Normalizer
from errors import (
    ChecksumError,
    CheckpointError,
    ConfigMismatchError,
    DivergenceError,
    NumericalError,
    ShapeError,
    TruncatedFileError,
    VersionMismatchError,
)
from models import GridSpec, Metrics, WindowSample
from transformer_model import ModelParams, forward_batch, forward_tensor, init_params, parameter_shapes
from utils import atomic_write, write_jsonl

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """First and second moment estimates per parameter plus the step count."""

    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        names = params.trainable()
        return cls(
            m={n: np.zeros_like(params[n].data) for n in names},
            v={n: np.zeros_like(params[n].data) for n in names},
        )


def adam_step(
    params: ModelParams,
    grads: Dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """
    One bias-corrected Adam update.

    Returns:
        ``(new_params, new_state)``; inputs are left untouched.

    Raises:
        ShapeError: If a gradient does not match its parameter.
        NumericalError: If a gradient is not finite.
    """
    t = state.t + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t

    new_m, new_v, updates = {}, {}, {}
    for name in params.trainable():
        p = params[name].data
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.isfinite(g).all():
            raise NumericalError(f"{name}: non-finite gradient")

        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        updates[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v

    return params.replace(updates), AdamState(new_m, new_v, t)


def stack_windows(samples: Sequence[WindowSample]):
    """Stack normalized windows into ``(inputs, labels)`` arrays."""
    if any(not s.normalized for s in samples):
        raise ValueError("windows must be normalized before training or evaluation")
    x = np.stack([s.inputs for s in samples]) if samples else np.zeros((0, 0, 0))
    y = np.array([s.label for s in samples], dtype=np.float64)
    return x, y


def loss_and_grads(params: ModelParams, x: np.ndarray, y: np.ndarray):
    """MSE of a batch and its gradient for every trainable parameter."""
    with nn.Tape() as tape:
        loss = nn.mse_loss(forward_tensor(params, nn.Tensor(x)), nn.Tensor(y))
    leaf_grads = tape.backward(loss)
    grads = {name: leaf_grads.get(params[name], np.zeros_like(params[name].data))
             for name in params.trainable()}
    return float(loss.data), grads


@dataclass
class TrainResult:
    params: ModelParams
    loss_curve: List[float]
    test_curve: List[dict] = field(default_factory=list)
    state: Optional[AdamState] = None
    train_accuracy_curve: List[float] = field(default_factory=list)


def train(
    model_config: ModelConfig,
    train_set: Sequence[WindowSample],
    train_config: TrainConfig,
    evaluator: Optional[Callable[[ModelParams], Metrics]] = None,
    log_path: Optional[Union[str, Path]] = None,
    params: Optional[ModelParams] = None,
    normalizer: Optional[Normalizer] = None,
    grid: Optional[GridSpec] = None,
) -> TrainResult:
    """
    Train with Adam on shuffled minibatches for ``train_config.epochs``.

    Args:
        model_config: Network shape and init seed.
        train_set: Normalized training windows.
        train_config: Optimizer and loop settings.
        evaluator: Optional callback scoring the params after every epoch.
        log_path: Optional JSON-lines file receiving one record per epoch.
        params: Optional starting parameters instead of a fresh init.
        normalizer: With ``grid``, enables per-epoch training-set accuracy.
        grid: Grid the labels index into.

    Raises:
        ValueError: On an empty training set.
        DivergenceError: If the loss turns non-finite; carries the params
            from the end of the last completed epoch.
    """
    if not train_set:
        raise ValueError("cannot train on an empty training set")

    x_all, y_all = stack_windows(train_set)
    if params is None:
        params = init_params(model_config)
    state = AdamState.zeros(params)
    rng = np.random.default_rng(train_config.seed)
    n = len(y_all)

    loss_curve: List[float] = []
    test_curve: List[dict] = []
    train_accuracy_curve: List[float] = []
    logger.info(
        "Training %d parameters on %d windows for %d epochs",
        params.size,
        n,
        train_config.epochs,
    )

    for epoch in range(1, train_config.epochs + 1):
        started = time.perf_counter()
        last_good = params
        order = rng.permutation(n) if train_config.shuffle else np.arange(n)
        weighted_loss = 0.0
        try:
            for start in range(0, n, train_config.batch_size):
                idx = order[start:start + train_config.batch_size]
                loss, grads = loss_and_grads(params, x_all[idx], y_all[idx])
                if not np.isfinite(loss):
                    raise NumericalError(f"loss is {loss}")
                params, state = adam_step(
                    params,
                    grads,
                    state,
                    train_config.learning_rate,
                    train_config.beta1,
                    train_config.beta2,
                    train_config.eps,
                )
                weighted_loss += loss * len(idx)
        except NumericalError as e:
            logger.error("Diverged in epoch %d: %s", epoch, e)
            raise DivergenceError(epoch, last_good) from e

        epoch_loss = weighted_loss / n
        loss_curve.append(epoch_loss)
        record = {
            "epoch": epoch,
            "train_mse": epoch_loss,
            "wall_ms": round((time.perf_counter() - started) * 1000.0, 3),
        }
        if normalizer is not None and grid is not None:
            train_accuracy = evaluate(params, train_set, normalizer, grid).accuracy
            record["train_accuracy"] = train_accuracy
            train_accuracy_curve.append(train_accuracy)
        if evaluator is not None:
            metrics = evaluator(params)
            record["test_mse"] = metrics.mse
            record["test_accuracy"] = metrics.accuracy
            test_curve.append(record)
        if log_path:
            write_jsonl(log_path, record)
        logger.info("Epoch %d/%d train_mse=%.6f", epoch, train_config.epochs, epoch_loss)

    return TrainResult(params, loss_curve, test_curve, state, train_accuracy_curve)


def round_half_up(values) -> np.ndarray:
    return np.floor(np.asarray(values, dtype=np.float64) + 0.5).astype(np.int64)


def evaluate(
    params: ModelParams,
    test_set: Sequence[WindowSample],
    normalizer: Normalizer,
    grid: GridSpec,
    predictions: Optional[np.ndarray] = None,
) -> Metrics:
    """
    Score normalized windows.

    ``mse`` is in normalized units; a prediction counts as correct when its
    denormalized value rounds to the label's grid id, and as within one
    cell when the rounded id differs by at most one.

    Raises:
        ValueError: On an empty test set.
    """
    if not test_set:
        raise ValueError("cannot evaluate on an empty test set")
    x, y = stack_windows(test_set)
    preds = forward_batch(params, x) if predictions is None else np.asarray(predictions)

    raw_labels = np.array([s.raw_label for s in test_set])
    cells = round_half_up(normalizer.inverse_label(preds))
    error = np.abs(cells - raw_labels)
    return Metrics(
        mse=float(np.mean((preds - y) ** 2)),
        accuracy=float(np.mean(error == 0)),
        accuracy_within_1=float(np.mean(error <= 1)),
        n_samples=len(test_set),
    )


# Checkpoint layout (little-endian):
#   b"CGFC" | u32 version | u32 manifest length | manifest JSON (utf-8)
#   | f64 arrays in manifest order | 32-byte SHA-256 of everything before it
CHECKPOINT_MAGIC = b"CGFC"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sII")
_DIGEST_SIZE = 32


@dataclass
class Checkpoint:
    params: ModelParams
    normalizer: Normalizer
    grid: GridSpec
    metadata: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.params.config


def save_checkpoint(
    path: Union[str, Path],
    params: ModelParams,
    normalizer: Normalizer,
    grid: GridSpec,
    metadata: Optional[dict] = None,
) -> None:
    """Write params, config, normalizer and grid to one checksummed file."""
    arrays = params.arrays()
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": params.config.model_dump(),
        "normalizer": normalizer.to_dict(),
        "grid": grid.to_dict(),
        "parameters": [{"name": n, "shape": list(a.shape)} for n, a in arrays.items()],
        "metadata": metadata or {},
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    body = b"".join(
        [
            _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(manifest_bytes)),
            manifest_bytes,
            *(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values()),
        ]
    )
    atomic_write(path, body + hashlib.sha256(body).digest())
    logger.info("Saved checkpoint %s (%d parameters)", path, params.size)


def load_checkpoint(
    path: Union[str, Path], expected_config: Optional[ModelConfig] = None
) -> Checkpoint:
    """
    Read a checkpoint written by ``save_checkpoint``.

    Nothing is returned unless the whole file validates.

    Raises:
        TruncatedFileError: If the file is shorter than its layout needs.
        VersionMismatchError: On an unknown format version.
        ChecksumError: If the SHA-256 trailer does not match.
        ConfigMismatchError: If the stored config differs from
            ``expected_config`` or the arrays do not fit the stored config.
    """
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size + _DIGEST_SIZE:
        raise TruncatedFileError(f"{path}: checkpoint is truncated")
    magic, version, manifest_len = _HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )
    body, digest = blob[:-_DIGEST_SIZE], blob[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch")

    offset = _HEADER.size + manifest_len
    if offset > len(body):
        raise TruncatedFileError(f"{path}: manifest runs past end of file")
    manifest = json.loads(body[_HEADER.size:offset].decode("utf-8"))

    config = ModelConfig.model_validate(manifest["config"])
    if expected_config is not None and expected_config != config:
        raise ConfigMismatchError(
            f"{path}: checkpoint config {config.model_dump()} != expected {expected_config.model_dump()}"
        )

    shapes = parameter_shapes(config)
    declared = [(p["name"], tuple(p["shape"])) for p in manifest["parameters"]]
    if declared != list(shapes.items()):
        raise ConfigMismatchError(f"{path}: parameter table does not match its config")

    arrays = {}
    for name, shape in declared:
        n_bytes = int(np.prod(shape)) * 8
        if offset + n_bytes > len(body):
            raise TruncatedFileError(f"{path}: array {name} runs past end of file")
        arrays[name] = np.frombuffer(body, dtype="<f8", count=int(np.prod(shape)), offset=offset).reshape(shape)
        offset += n_bytes
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} trailing bytes")

    return Checkpoint(
        params=ModelParams.from_arrays(config, arrays),
        normalizer=Normalizer.from_dict(manifest["normalizer"]),
        grid=GridSpec.from_dict(manifest["grid"]),
        metadata=manifest.get("metadata", {}),
    )
