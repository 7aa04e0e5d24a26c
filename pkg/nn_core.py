"""
Dense Tensor Numerics with Reverse-Mode Differentiation.

A small float64 tensor type over numpy arrays and the operations the
forecasting network needs. Operations executed inside an active ``Tape``
are recorded together with their gradient rules; ``backward`` replays
them in reverse to produce parameter gradients.

Usage:
    with Tape() as tape:
        loss = mse_loss(matmul(x, w), y)
    grads = tape.backward(loss)
    grads[w]  # d loss / d w
"""

import math
import threading
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf

from errors import NumericalError, ShapeError

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

GradFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """
    Immutable float64 array that may take part in differentiation.

    Construction rejects NaN and infinity, so every op output is checked.
    Equality and hashing are by identity so tensors can key gradient maps.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        array = np.array(data, dtype=np.float64)
        if not np.isfinite(array).all():
            raise NumericalError(f"non-finite values in tensor {name or ''}".rstrip())
        array.setflags(write=False)
        self.data = array
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} grad={self.requires_grad}>"


class _Node:
    __slots__ = ("output", "parents", "grad_fn")

    def __init__(self, output: Tensor, parents: Tuple[Tensor, ...], grad_fn: GradFn):
        self.output = output
        self.parents = parents
        self.grad_fn = grad_fn


_active = threading.local()


class Tape:
    """
    Records differentiable operations in execution order.

    A tape is thread-local while active and may be consumed by exactly
    one ``backward`` call.
    """

    def __init__(self):
        self._nodes: List[_Node] = []
        self._produced: Dict[int, int] = {}
        self._leaves: Dict[int, Tensor] = {}
        self._consumed = False
        self._previous: Optional["Tape"] = None

    def __enter__(self) -> "Tape":
        self._previous = getattr(_active, "tape", None)
        _active.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _active.tape = self._previous

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, output: Tensor, parents: Tuple[Tensor, ...], grad_fn: GradFn) -> None:
        if self._consumed:
            raise RuntimeError("cannot record on a tape that has been consumed")
        for p in parents:
            if p.requires_grad and id(p) not in self._produced:
                self._leaves.setdefault(id(p), p)
        output.requires_grad = True
        self._produced[id(output)] = len(self._nodes)
        self._nodes.append(_Node(output, parents, grad_fn))

    def backward(self, loss: Tensor) -> Dict[Tensor, np.ndarray]:
        """
        Accumulate d loss / d leaf for every leaf tensor that requires grad.

        Returns:
            Mapping from leaf tensor to its gradient array; leaves the loss
            does not depend on get zeros.

        Raises:
            ShapeError: If ``loss`` is not a scalar.
            RuntimeError: If the tape was already consumed or ``loss`` was
                not recorded on it.
        """
        if self._consumed:
            raise RuntimeError("backward already called on this tape; record a new one")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise RuntimeError("loss was not produced on this tape")
        self._consumed = True

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        visited = set()
        for index in range(self._produced[id(loss)], -1, -1):
            node = self._nodes[index]
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            assert index not in visited, "tape visited a node twice"
            visited.add(index)
            for parent, pg in zip(node.parents, node.grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                assert self._produced.get(id(parent), -1) < index, "tape is not topological"
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

        result = {}
        for key, leaf in self._leaves.items():
            g = grads.get(key)
            result[leaf] = np.zeros_like(leaf.data) if g is None else g
            if not np.isfinite(result[leaf]).all():
                raise NumericalError(f"non-finite gradient for {leaf!r}")
        self._nodes.clear()
        return result


def _current_tape() -> Optional[Tape]:
    return getattr(_active, "tape", None)


def _emit(data: np.ndarray, parents: Tuple[Tensor, ...], grad_fn: GradFn) -> Tensor:
    out = Tensor(data)
    tape = _current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(out, parents, grad_fn)
    return out


def backward(loss: Tensor, tape: Optional[Tape] = None) -> Dict[Tensor, np.ndarray]:
    """Run ``tape.backward`` on the given or currently active tape."""
    tape = tape or _current_tape()
    if tape is None:
        raise RuntimeError("no tape recorded this loss")
    return tape.backward(loss)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return _emit(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return _emit(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    return _emit(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(x: Tensor, factor: float) -> Tensor:
    return _emit(x.data * factor, (x,), lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes; leading axes broadcast, so a
    ``[batch, m, k]`` activation can multiply a shared ``[k, n]`` weight.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    def grad_fn(g):
        da = np.matmul(g, np.swapaxes(b.data, -1, -2))
        db = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(da, a.shape), _unbroadcast(db, b.shape)

    return _emit(np.matmul(a.data, b.data), (a, b), grad_fn)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _emit(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} into {tuple(shape)}") from None
    return _emit(out, (x,), lambda g: (g.reshape(x.shape),))


def sum_all(x: Tensor) -> Tensor:
    return _emit(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor, axis: int) -> Tensor:
    """Mean over one axis (the axis is removed)."""
    n = x.shape[axis]

    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

    return _emit(x.data.mean(axis=axis), (x,), grad_fn)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with the row maximum subtracted first."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit(s, (x,), grad_fn)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with Phi the standard normal CDF."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return _emit(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _emit(t, (x,), lambda g: (g * (1.0 - t * t),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """
    Normalize each row over the last axis to zero mean and unit variance,
    then apply ``gain`` and ``bias``.
    """
    d = x.shape[-1]
    if d < 2:
        raise ShapeError(f"layer_norm needs at least 2 features, got {d}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({d},)")

    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def grad_fn(g):
        dxhat = g * gain.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        return dx, dgain, dbias

    return _emit(xhat * gain.data + bias.data, (x, gain, bias), grad_fn)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences as a scalar tensor."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def grad_fn(g):
        d = g * 2.0 * diff / n
        return d, -d

    return _emit(np.array((diff * diff).mean()), (pred, target), grad_fn)
