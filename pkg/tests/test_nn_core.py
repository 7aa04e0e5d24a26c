"""
Tensor and Autodiff Tests.

Tests for the tensor type, each differentiable operation and the tape,
with gradients checked against central differences.
"""

from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from errors import NumericalError, ShapeError
from nn_core import (
    Tape,
    Tensor,
    add,
    backward,
    gelu,
    layer_norm,
    matmul,
    mean,
    mse_loss,
    mul,
    permute,
    relu,
    reshape,
    scale,
    softmax_rows,
    sub,
    sum_all,
    tanh,
    transpose,
)

EPS = 1e-5


def weighted_sum(out, weights):
    return sum_all(mul(out, Tensor(weights)))


def gradient_error(fn, *arrays):
    """Largest gradient error of ``fn`` against central differences, relative to max(|g|, 1)."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = fn(*tensors)
    grads = tape.backward(loss)

    worst = 0.0
    for i, a in enumerate(arrays):
        numeric = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[i][idx] += EPS
            minus[i][idx] -= EPS
            f_plus = fn(*[Tensor(x) for x in plus]).item()
            f_minus = fn(*[Tensor(x) for x in minus]).item()
            numeric[idx] = (f_plus - f_minus) / (2 * EPS)
        err = np.abs(grads[tensors[i]] - numeric).max() / max(np.abs(numeric).max(), 1.0)
        worst = max(worst, err)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(11)


class TestTensor:
    """Tests for the tensor type."""

    def test_rejects_nan(self):
        """Test that NaN data is refused."""
        with pytest.raises(NumericalError):
            Tensor([1.0, float("nan")])

    def test_rejects_inf(self):
        """Test that infinite data is refused."""
        with pytest.raises(NumericalError):
            Tensor([float("inf")])

    def test_read_only(self):
        """Test that tensor data cannot be written in place."""
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5.0

    def test_overflow_is_caught(self):
        """Test that an op producing infinity raises."""
        with pytest.raises(NumericalError):
            scale(Tensor([1e308]), 10.0)

    def test_float64(self):
        """Test that integer input is stored in double precision."""
        t = Tensor([[1, 2], [3, 4]])
        assert t.data.dtype == np.float64
        assert t.shape == (2, 2)
        assert t.size == 4


class TestMatmul:
    """Tests for matrix products."""

    def test_two_by_two(self):
        """Test a hand-checkable product."""
        out = matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5, 6], [7, 8]]))
        np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])

    def test_inner_mismatch(self):
        """Test that mismatched inner dimensions raise."""
        with pytest.raises(ShapeError, match="inner dimensions"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_against_shared_weight(self, rng):
        """Test a batch of matrices times one weight."""
        a, w = rng.normal(size=(3, 4, 5)), rng.normal(size=(5, 2))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(w)).data, a @ w)

    def test_gradient(self, rng):
        """Test matmul gradients for both operands, including a shared weight."""
        a, b = rng.uniform(-2, 2, (2, 3, 4)), rng.uniform(-2, 2, (4, 5))
        weights = rng.normal(size=(2, 3, 5))
        assert gradient_error(lambda x, y: weighted_sum(matmul(x, y), weights), a, b) < 1e-6


class TestLinearOps:
    """Gradient checks for the shape and elementwise linear ops."""

    def test_add_broadcast(self, rng):
        """Test add with a broadcast bias row."""
        a, b = rng.uniform(-2, 2, (4, 3)), rng.uniform(-2, 2, (3,))
        weights = rng.normal(size=(4, 3))
        assert gradient_error(lambda x, y: weighted_sum(add(x, y), weights), a, b) < 1e-6

    def test_sub(self, rng):
        """Test subtraction gradients."""
        a, b = rng.uniform(-2, 2, (2, 3)), rng.uniform(-2, 2, (2, 3))
        weights = rng.normal(size=(2, 3))
        assert gradient_error(lambda x, y: weighted_sum(sub(x, y), weights), a, b) < 1e-6

    def test_mul(self, rng):
        """Test elementwise product gradients."""
        a, b = rng.uniform(-2, 2, (3, 1)), rng.uniform(-2, 2, (3, 4))
        weights = rng.normal(size=(3, 4))
        assert gradient_error(lambda x, y: weighted_sum(mul(x, y), weights), a, b) < 1e-6

    def test_shape_ops(self, rng):
        """Test transpose, permute, reshape and mean gradients."""
        a = rng.uniform(-2, 2, (2, 3, 4))
        w_t = rng.normal(size=(2, 4, 3))
        w_p = rng.normal(size=(3, 2, 4))
        w_r = rng.normal(size=(6, 4))
        w_m = rng.normal(size=(2, 4))
        assert gradient_error(lambda x: weighted_sum(transpose(x), w_t), a) < 1e-6
        assert gradient_error(lambda x: weighted_sum(permute(x, (1, 0, 2)), w_p), a) < 1e-6
        assert gradient_error(lambda x: weighted_sum(reshape(x, (6, 4)), w_r), a) < 1e-6
        assert gradient_error(lambda x: weighted_sum(mean(x, axis=1), w_m), a) < 1e-6

    def test_broadcast_mismatch(self):
        """Test that shapes that do not broadcast raise."""
        with pytest.raises(ShapeError, match="do not broadcast"):
            add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))

    def test_reshape_mismatch(self):
        """Test that an impossible reshape raises."""
        with pytest.raises(ShapeError):
            reshape(Tensor(np.ones((2, 3))), (4, 2))


class TestSoftmax:
    """Tests for the row softmax."""

    def test_uniform_row(self):
        """Test that equal logits give equal weights."""
        np.testing.assert_allclose(softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3])

    def test_saturation(self):
        """Test that large logits do not overflow."""
        out = softmax_rows(Tensor([[1000.0, 0.0]])).data
        np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-12)

    def test_rows_sum_to_one(self, rng):
        """Test normalization of random rows."""
        out = softmax_rows(Tensor(rng.uniform(-5, 5, (6, 9)))).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
        assert ((out > 0) & (out < 1)).all()

    def test_gradient(self, rng):
        """Test softmax gradients against central differences."""
        a = rng.uniform(-2, 2, (3, 4))
        weights = rng.normal(size=(3, 4))
        assert gradient_error(lambda x: weighted_sum(softmax_rows(x), weights), a) < 1e-4


class TestActivations:
    """Tests for GELU, ReLU and tanh."""

    def test_gelu_values(self):
        """Test GELU at zero, one and a large input."""
        out = gelu(Tensor([0.0, 1.0, 10.0])).data
        assert out[0] == 0.0
        assert out[1] == pytest.approx(0.841345, abs=1e-6)
        assert -1e-9 < out[2] - 10.0 <= 0.0

    def test_relu_values(self):
        """Test that ReLU zeroes negatives."""
        np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.5])).data, [0.0, 0.0, 2.5])

    def test_tanh_range(self, rng):
        """Test that tanh stays within (-1, 1)."""
        out = tanh(Tensor(rng.uniform(-5, 5, 50))).data
        assert (np.abs(out) < 1).all()

    @pytest.mark.parametrize("op", [gelu, relu, tanh])
    def test_gradient(self, op, rng):
        """Test activation gradients against central differences."""
        a = rng.uniform(-2, 2, (4, 5))
        weights = rng.normal(size=(4, 5))
        assert gradient_error(lambda x: weighted_sum(op(x), weights), a) < 1e-4


class TestLayerNorm:
    """Tests for layer normalization."""

    def test_constant_row(self):
        """Test that a constant row normalizes to zeros."""
        out = layer_norm(Tensor([[3.0, 3.0, 3.0, 3.0]]), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 4)))

    def test_moments(self, rng):
        """Test zero mean and unit variance per row."""
        x = rng.uniform(-2, 2, (5, 8)) * 100.0
        out = layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
        assert np.abs(out.mean(axis=-1)).max() < 1e-12
        assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-6

    def test_affine(self, rng):
        """Test that gain and bias are applied after normalization."""
        x = rng.uniform(-2, 2, (2, 4))
        plain = layer_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4))).data
        gain, bias = np.array([1.0, 2.0, 3.0, 4.0]), np.array([0.5, 0.0, -0.5, 1.0])
        out = layer_norm(Tensor(x), Tensor(gain), Tensor(bias)).data
        np.testing.assert_allclose(out, plain * gain + bias)

    def test_needs_two_features(self):
        """Test that a single feature cannot be normalized."""
        with pytest.raises(ShapeError):
            layer_norm(Tensor([[1.0]]), Tensor([1.0]), Tensor([0.0]))

    def test_gradient(self, rng):
        """Test gradients for input, gain and bias."""
        x = rng.uniform(-2, 2, (3, 5))
        gain, bias = rng.uniform(0.5, 1.5, 5), rng.uniform(-0.5, 0.5, 5)
        weights = rng.normal(size=(3, 5))
        err = gradient_error(lambda a, g, b: weighted_sum(layer_norm(a, g, b), weights), x, gain, bias)
        assert err < 1e-4


class TestMseLoss:
    """Tests for the mean squared error."""

    def test_equal(self):
        """Test that identical inputs give zero loss."""
        assert mse_loss(Tensor([0.3, -0.2]), Tensor([0.3, -0.2])).item() == 0.0

    def test_unit(self):
        """Test that [1, 1] against [0, 0] gives 1."""
        assert mse_loss(Tensor([1.0, 1.0]), Tensor([0.0, 0.0])).item() == 1.0

    def test_shape_mismatch(self):
        """Test that differently shaped inputs raise."""
        with pytest.raises(ShapeError):
            mse_loss(Tensor([1.0, 2.0]), Tensor([1.0]))

    def test_gradient(self, rng):
        """Test that the gradient is 2(pred - target)/n."""
        pred, target = rng.uniform(-1, 1, 6), rng.uniform(-1, 1, 6)
        p = Tensor(pred, requires_grad=True)
        with Tape() as tape:
            loss = mse_loss(p, Tensor(target))
        grads = tape.backward(loss)
        np.testing.assert_allclose(grads[p], 2 * (pred - target) / 6)
        assert gradient_error(lambda a, b: mse_loss(a, b), pred, target) < 1e-6


class TestBackward:
    """Tests for the tape and reverse accumulation."""

    def test_sum_gives_ones(self):
        """Test that d sum(w) / d w is all ones."""
        w = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with Tape() as tape:
            loss = sum_all(w)
        np.testing.assert_array_equal(tape.backward(loss)[w], np.ones((2, 3)))

    def test_reused_tensor_accumulates(self):
        """Test that a tensor used twice receives both contributions."""
        w = Tensor([2.0, 3.0], requires_grad=True)
        with Tape() as tape:
            loss = sum_all(mul(w, w))
        np.testing.assert_allclose(tape.backward(loss)[w], [4.0, 6.0])

    def test_composite_chain(self, rng):
        """Test a gelu(matmul) chain against central differences."""
        x, w = rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (4, 2))
        weights = rng.normal(size=(3, 2))
        assert gradient_error(lambda a, b: weighted_sum(gelu(matmul(a, b)), weights), x, w) < 1e-4

    def test_backward_twice(self):
        """Test that a tape can only be consumed once."""
        w = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = sum_all(w)
        tape.backward(loss)
        with pytest.raises(RuntimeError, match="already called"):
            tape.backward(loss)

    def test_non_scalar_loss(self):
        """Test that a vector loss is refused."""
        w = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            out = scale(w, 2.0)
        with pytest.raises(ShapeError, match="scalar"):
            tape.backward(out)

    def test_unused_leaf_gets_zeros(self):
        """Test that a leaf the loss ignores receives a zero gradient."""
        w = Tensor([1.0, 2.0], requires_grad=True)
        v = Tensor([5.0, 6.0], requires_grad=True)
        with Tape() as tape:
            scale(v, 3.0)
            loss = sum_all(w)
        grads = tape.backward(loss)
        np.testing.assert_array_equal(grads[v], [0.0, 0.0])

    def test_no_recording_outside_tape(self):
        """Test that ops outside a tape record nothing."""
        w = Tensor([1.0, 2.0], requires_grad=True)
        loss = sum_all(w)
        with pytest.raises(RuntimeError, match="no tape"):
            backward(loss)

    def test_module_level_backward(self):
        """Test backward on the active tape."""
        w = Tensor([1.0, -1.0], requires_grad=True)
        with Tape():
            loss = sum_all(scale(w, 3.0))
            grads = backward(loss)
        np.testing.assert_array_equal(grads[w], [3.0, 3.0])

    def test_parallel_tapes(self, rng):
        """Test that tapes in separate threads do not interfere."""
        x = rng.uniform(-2, 2, (4, 4))

        def run(factor):
            w = Tensor(x * factor, requires_grad=True)
            with Tape() as tape:
                loss = sum_all(gelu(matmul(w, w)))
            return tape.backward(loss)[w]

        sequential = [run(f) for f in (1.0, 0.5, -1.0, 2.0)]
        with ThreadPoolExecutor(max_workers=4) as pool:
            threaded = list(pool.map(run, (1.0, 0.5, -1.0, 2.0)))
        for a, b in zip(sequential, threaded):
            np.testing.assert_array_equal(a, b)
