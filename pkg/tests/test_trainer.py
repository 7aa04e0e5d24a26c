"""
Trainer Tests.

Tests for the Adam update, the training loop, evaluation metrics and
the checkpoint file.
"""

import json
import struct

import numpy as np
import pytest

import trainer
from config import ModelConfig, TrainConfig
from dataset_builder import Normalizer, prepare_dataset
from errors import (
    ChecksumError,
    CheckpointError,
    ConfigMismatchError,
    DivergenceError,
    TruncatedFileError,
    VersionMismatchError,
)
from models import GridSpec, Metrics, WindowSample
from trainer import (
    AdamState,
    adam_step,
    evaluate,
    load_checkpoint,
    round_half_up,
    save_checkpoint,
    train,
)
from transformer_model import forward_batch, init_params

SMALL = ModelConfig(d_model=8, n_heads=2, n_layers=1, ffn_hidden=8, head_hidden=4, seed=1)


def read_jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def normalized_windows(n, seed=0):
    """Normalized windows whose label is a smooth function of the inputs."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (n, 12, 5))
    y = x[:, :, 0].mean(axis=1) + 0.5 * x[:, :, 1].mean(axis=1)
    return [
        WindowSample(f"AL{i % 9 + 1:02d}2000", x[i], float(y[i]), int(i), normalized=True)
        for i in range(n)
    ]


@pytest.fixture
def grid():
    return GridSpec(lon_min=-100.0, lon_max=0.0, lat_min=0.0, lat_max=60.0)


@pytest.fixture
def normalizer(grid):
    return Normalizer(
        feature_min=(10.0, 900.0, 0.0, 0.0, 0.0),
        feature_max=(170.0, 1020.0, 300.0, 360.0, float(grid.cell_count - 1)),
        label_min=0.0,
        label_max=float(grid.cell_count - 1),
    )


def labelled(normalizer, cells):
    """Normalized test windows for the given label cells."""
    return [
        WindowSample(
            "AL012000",
            np.zeros((12, 5)),
            float(normalizer.transform_label(c)),
            c,
            normalized=True,
        )
        for c in cells
    ]


class TestAdamStep:
    """Tests for the bias-corrected Adam update."""

    def test_zero_gradient(self):
        """Test that a zero gradient from a zero state changes nothing."""
        params = init_params(SMALL)
        grads = {n: np.zeros(params[n].shape) for n in params.trainable()}
        new_params, state = adam_step(params, grads, AdamState.zeros(params), lr=1e-3)
        for name in params:
            np.testing.assert_array_equal(new_params[name].data, params[name].data)
        assert state.t == 1

    def test_first_step_unit_gradient(self):
        """Test that g = 1 moves every trainable parameter down by about lr."""
        params = init_params(SMALL)
        grads = {n: np.ones(params[n].shape) for n in params.trainable()}
        new_params, _ = adam_step(params, grads, AdamState.zeros(params), lr=1e-3)
        for name in params.trainable():
            np.testing.assert_allclose(params[name].data - new_params[name].data, 1e-3, rtol=1e-6)
        np.testing.assert_array_equal(new_params["pos.table"].data, params["pos.table"].data)

    def test_inputs_untouched(self):
        """Test that the old params and state are not modified."""
        params = init_params(SMALL)
        before = params["head.w1"].data.copy()
        state = AdamState.zeros(params)
        grads = {n: np.ones(params[n].shape) for n in params.trainable()}
        adam_step(params, grads, state, lr=1e-2)
        np.testing.assert_array_equal(params["head.w1"].data, before)
        assert state.t == 0
        assert not state.m["head.w1"].any()

    def test_deterministic(self):
        """Test that ten identical steps give bit-identical params."""
        def run():
            params = init_params(SMALL)
            state = AdamState.zeros(params)
            rng = np.random.default_rng(0)
            for _ in range(10):
                grads = {n: rng.normal(size=params[n].shape) for n in params.trainable()}
                params, state = adam_step(params, grads, state, lr=1e-3)
            return params

        a, b = run(), run()
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)

    def test_shape_mismatch(self):
        """Test that a wrongly shaped gradient is rejected."""
        params = init_params(SMALL)
        with pytest.raises(ValueError, match="head.b2"):
            adam_step(params, {"head.b2": np.zeros(3)}, AdamState.zeros(params), lr=1e-3)

    def test_non_finite_gradient(self):
        """Test that a NaN gradient is rejected."""
        params = init_params(SMALL)
        grads = {"head.b2": np.array([np.nan])}
        with pytest.raises(ArithmeticError):
            adam_step(params, grads, AdamState.zeros(params), lr=1e-3)


class TestTrain:
    """Tests for the training loop."""

    def test_curve_length_and_finite(self):
        """Test one finite loss value per epoch."""
        result = train(SMALL, normalized_windows(20), TrainConfig(epochs=5, batch_size=8))
        assert len(result.loss_curve) == 5
        assert all(np.isfinite(result.loss_curve))
        assert result.state.t == 5 * 3

    def test_loss_decreases(self):
        """Test that a few epochs reduce the training loss."""
        result = train(SMALL, normalized_windows(32), TrainConfig(epochs=30, batch_size=8, learning_rate=3e-3))
        assert result.loss_curve[-1] < result.loss_curve[0]

    def test_deterministic(self):
        """Test that equal seeds give bit-identical trained params."""
        config = TrainConfig(epochs=3, batch_size=4, seed=7)
        a = train(SMALL, normalized_windows(12), config).params
        b = train(SMALL, normalized_windows(12), config).params
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)

    def test_log_file(self, tmp_path):
        """Test one JSON line per epoch with the test scores when evaluated."""
        log = tmp_path / "train_log.jsonl"

        def evaluator(params):
            return Metrics(mse=0.25, accuracy=0.5, accuracy_within_1=0.75, n_samples=4)

        result = train(SMALL, normalized_windows(10), TrainConfig(epochs=2, batch_size=5), evaluator, log)
        records = read_jsonl(log)
        assert [r["epoch"] for r in records] == [1, 2]
        assert records[0]["train_mse"] == result.loss_curve[0]
        assert records[1]["test_accuracy"] == 0.5
        assert records[1]["wall_ms"] >= 0
        assert len(result.test_curve) == 2
        assert "train_accuracy" not in records[0]

    def test_log_train_accuracy(self, tmp_path, normalizer, grid):
        """Test that a normalizer and grid add the training accuracy to every epoch record."""
        log = tmp_path / "train_log.jsonl"
        windows = normalized_windows(10)
        result = train(
            SMALL,
            windows,
            TrainConfig(epochs=3, batch_size=5),
            log_path=log,
            normalizer=normalizer,
            grid=grid,
        )
        records = read_jsonl(log)
        assert [r["train_accuracy"] for r in records] == result.train_accuracy_curve
        assert len(result.train_accuracy_curve) == 3
        assert all(0.0 <= a <= 1.0 for a in result.train_accuracy_curve)
        assert records[-1]["train_accuracy"] == evaluate(result.params, windows, normalizer, grid).accuracy

    def test_empty_train_set(self):
        """Test that training needs at least one window."""
        with pytest.raises(ValueError, match="empty training set"):
            train(SMALL, [], TrainConfig(epochs=1))

    def test_unnormalized_windows(self):
        """Test that raw windows are refused."""
        raw = [WindowSample("AL012000", np.zeros((12, 5)), 3.0, 3)]
        with pytest.raises(ValueError, match="normalized"):
            train(SMALL, raw, TrainConfig(epochs=1))

    def test_divergence_keeps_last_good(self, monkeypatch):
        """Test that a NaN loss stops training and keeps the last completed epoch."""
        real = trainer.loss_and_grads
        calls = {"n": 0}

        def flaky(params, x, y):
            calls["n"] += 1
            loss, grads = real(params, x, y)
            return (float("nan") if calls["n"] > 2 else loss), grads

        monkeypatch.setattr(trainer, "loss_and_grads", flaky)
        windows = normalized_windows(8)
        with pytest.raises(DivergenceError) as exc_info:
            train(SMALL, windows, TrainConfig(epochs=5, batch_size=4, shuffle=False))

        err = exc_info.value
        assert err.epoch == 2
        monkeypatch.setattr(trainer, "loss_and_grads", real)
        reference = train(SMALL, windows, TrainConfig(epochs=1, batch_size=4, shuffle=False)).params
        for name in reference:
            np.testing.assert_array_equal(err.last_good[name].data, reference[name].data)

    @pytest.mark.slow
    def test_overfit_small_set(self, training_tracks, training_grid):
        """Test that the default network memorizes 32 real windows."""
        windows = prepare_dataset(training_tracks, training_grid, seed=0).train[:32]
        assert len(windows) == 32
        result = train(ModelConfig(), windows, TrainConfig(epochs=2000, batch_size=32))
        assert result.loss_curve[-1] < 1e-3


class TestEvaluate:
    """Tests for test-set scoring."""

    def test_perfect_predictions(self, normalizer, grid):
        """Test that predictions equal to labels score mse 0 and accuracy 1."""
        samples = labelled(normalizer, [10, 500, 4321])
        preds = np.array([s.label for s in samples])
        metrics = evaluate(init_params(ModelConfig()), samples, normalizer, grid, predictions=preds)
        assert metrics.mse == 0.0
        assert metrics.accuracy == 1.0
        assert metrics.accuracy_within_1 == 1.0
        assert metrics.n_samples == 3

    def test_rounding(self, normalizer, grid):
        """Test that 1234.4 counts as 1234 and 1235.2 only within one cell."""
        samples = labelled(normalizer, [1234, 1234])
        preds = normalizer.transform_label(np.array([1234.4, 1235.2]))
        metrics = evaluate(init_params(ModelConfig()), samples, normalizer, grid, predictions=preds)
        assert metrics.accuracy == 0.5
        assert metrics.accuracy_within_1 == 1.0

    def test_round_half_up(self):
        """Test the rounding rule at the half."""
        np.testing.assert_array_equal(round_half_up([2.5, 3.5, 1234.4, -0.5]), [3, 4, 1234, 0])

    def test_uses_model(self, normalizer, grid):
        """Test that without given predictions the model is run."""
        params = init_params(ModelConfig())
        samples = labelled(normalizer, [100, 200])
        preds = forward_batch(params, np.stack([s.inputs for s in samples]))
        expected = float(np.mean((preds - np.array([s.label for s in samples])) ** 2))
        assert evaluate(params, samples, normalizer, grid).mse == pytest.approx(expected)

    def test_empty(self, normalizer, grid):
        """Test that an empty test set is rejected."""
        with pytest.raises(ValueError, match="empty test set"):
            evaluate(init_params(ModelConfig()), [], normalizer, grid)


class TestCheckpoint:
    """Tests for saving and loading checkpoints."""

    @pytest.fixture
    def saved(self, tmp_path, normalizer, grid):
        path = tmp_path / "checkpoint.cgf"
        params = init_params(SMALL)
        save_checkpoint(path, params, normalizer, grid, {"epochs": 3})
        return path, params

    def test_round_trip(self, saved, normalizer, grid):
        """Test that params, config, normalizer, grid and metadata read back."""
        path, params = saved
        checkpoint = load_checkpoint(path, expected_config=SMALL)
        assert checkpoint.config == SMALL
        assert checkpoint.normalizer == normalizer
        assert checkpoint.grid == grid
        assert checkpoint.metadata == {"epochs": 3}
        for name in params:
            np.testing.assert_array_equal(checkpoint.params[name].data, params[name].data)
        assert not checkpoint.params["pos.table"].requires_grad

    def test_same_predictions(self, saved):
        """Test that a reloaded model predicts identically."""
        path, params = saved
        x = np.stack([w.inputs for w in normalized_windows(4)])
        np.testing.assert_array_equal(forward_batch(load_checkpoint(path).params, x), forward_batch(params, x))

    def test_config_mismatch(self, saved):
        """Test that a different expected config is refused."""
        path, _ = saved
        with pytest.raises(ConfigMismatchError):
            load_checkpoint(path, expected_config=ModelConfig())

    def test_corrupted_byte(self, saved):
        """Test that a flipped byte fails the checksum."""
        path, _ = saved
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0x01
        path.write_bytes(bytes(blob))
        with pytest.raises(ChecksumError):
            load_checkpoint(path)

    def test_truncated(self, saved):
        """Test that a cut-off file is reported as truncated."""
        path, _ = saved
        path.write_bytes(path.read_bytes()[:20])
        with pytest.raises(TruncatedFileError):
            load_checkpoint(path)

    def test_version_mismatch(self, saved):
        """Test that an unknown format version is refused."""
        path, _ = saved
        blob = bytearray(path.read_bytes())
        blob[4:8] = struct.pack("<I", 2)
        path.write_bytes(bytes(blob))
        with pytest.raises(VersionMismatchError):
            load_checkpoint(path)

    def test_wrong_magic(self, saved):
        """Test that a foreign file is refused."""
        path, _ = saved
        path.write_bytes(b"NOPE" + path.read_bytes()[4:])
        with pytest.raises(CheckpointError, match="not a checkpoint"):
            load_checkpoint(path)
