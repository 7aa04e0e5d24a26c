"""
Encoder-Only Transformer for Next-Cell Forecasting.

Input projection plus a fixed sinusoidal position table, a stack of
encoder layers (multi-head self-attention and a GELU feed-forward
block, each with a residual path and optional layer norm), mean pooling
over time and a two-layer head (ReLU then tanh) that emits the
normalized grid id of the next fix.
"""

import logging
import math
from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

import nn_core as nn
from config import ModelConfig
from errors import ShapeError
from nn_core import Tensor

logger = logging.getLogger(__name__)

# Parameters kept fixed during training
FROZEN = frozenset({"pos.table"})


def parameter_shapes(config: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """Name and shape of every model tensor, in checkpoint order."""
    d, f, h = config.d_model, config.ffn_hidden, config.head_hidden
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    shapes["embed.weight"] = (config.in_features, d)
    shapes["embed.bias"] = (d,)
    shapes["pos.table"] = (config.seq_len, d)
    for layer in range(config.n_layers):
        prefix = f"layers.{layer}"
        for proj in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.attn.{proj}"] = (d, d)
        shapes[f"{prefix}.ffn.w1"] = (d, f)
        shapes[f"{prefix}.ffn.b1"] = (f,)
        shapes[f"{prefix}.ffn.w2"] = (f, d)
        shapes[f"{prefix}.ffn.b2"] = (d,)
        if config.use_layer_norm:
            for norm in ("norm1", "norm2"):
                shapes[f"{prefix}.{norm}.gain"] = (d,)
                shapes[f"{prefix}.{norm}.bias"] = (d,)
    shapes["head.w1"] = (d, h)
    shapes["head.b1"] = (h,)
    shapes["head.w2"] = (h, 1)
    shapes["head.b2"] = (1,)
    return shapes


def parameter_count(config: ModelConfig) -> int:
    """
    Total scalar count, position table included:
    ``(in+1)d + seq*d + L(4d^2 + 2df + f + d + [4d]) + dh + 2h + 1``.
    """
    return sum(int(np.prod(shape)) for shape in parameter_shapes(config).values())


def sinusoidal_table(seq_len: int, d_model: int) -> np.ndarray:
    """Fixed sine/cosine position table: sin on even columns, cos on odd."""
    positions = np.arange(seq_len)[:, None]
    rates = np.power(10000.0, -(np.arange(0, d_model, 2) / d_model))
    table = np.zeros((seq_len, d_model))
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates[: d_model // 2])
    return table


class ModelParams:
    """
    Named model tensors bound to the config that shapes them.

    Trainable tensors are created with ``requires_grad`` so a surrounding
    ``Tape`` records everything computed from them.
    """

    def __init__(self, config: ModelConfig, tensors: "OrderedDict[str, Tensor]"):
        expected = parameter_shapes(config)
        if list(tensors) != list(expected):
            raise ShapeError("parameter names do not match the model config")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {tensors[name].shape}")
        self.config = config
        self._tensors = tensors

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: Dict[str, np.ndarray]) -> "ModelParams":
        tensors = OrderedDict(
            (name, Tensor(arrays[name], requires_grad=name not in FROZEN, name=name))
            for name in parameter_shapes(config)
        )
        return cls(config, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def trainable(self) -> List[str]:
        return [name for name in self._tensors if name not in FROZEN]

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, t.data) for name, t in self._tensors.items())

    def replace(self, updates: Dict[str, np.ndarray]) -> "ModelParams":
        """New params with some arrays swapped out; the rest are shared."""
        arrays = dict(self.arrays())
        arrays.update(updates)
        return ModelParams.from_arrays(self.config, arrays)

    def layer(self, index: int) -> Dict[str, Tensor]:
        """Tensors of one encoder layer with the layer prefix stripped."""
        prefix = f"layers.{index}."
        return {
            name[len(prefix):]: t for name, t in self._tensors.items() if name.startswith(prefix)
        }

    @property
    def size(self) -> int:
        return sum(t.size for t in self._tensors.values())


def init_params(config: ModelConfig) -> ModelParams:
    """
    Seeded initialization: weights uniform in ``+-1/sqrt(fan_in)``, biases
    zero, norm gains one, the position table sinusoidal.
    """
    rng = np.random.default_rng(config.seed)
    arrays: Dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config).items():
        if name == "pos.table":
            arrays[name] = sinusoidal_table(config.seq_len, config.d_model)
        elif name.endswith(".gain"):
            arrays[name] = np.ones(shape)
        elif len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    params = ModelParams.from_arrays(config, arrays)
    logger.debug("Initialized %d parameters (seed %d)", params.size, config.seed)
    return params


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, t, d = x.shape
    x = nn.reshape(x, (*lead, t, n_heads, d // n_heads))
    n = len(lead)
    return nn.permute(x, (*range(n), n + 1, n, n + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, dh = x.shape
    n = len(lead)
    x = nn.permute(x, (*range(n), n + 1, n, n + 2))
    return nn.reshape(x, (*lead, t, h * dh))


def multi_head_attention(
    x: Tensor, layer: Dict[str, Tensor], n_heads: int, return_weights: bool = False
) -> Union[Tensor, Tuple[Tensor, Tensor]]:
    """
    Scaled dot-product self-attention over ``[..., seq, d_model]`` with a
    residual connection: ``x + concat_h(softmax(Q_h K_h^T / sqrt(d_h)) V_h) W_o``.

    With ``return_weights`` the attention matrix ``[..., heads, seq, seq]``
    is returned as well.
    """
    d = x.shape[-1]
    if layer["attn.wq"].shape != (d, d):
        raise ShapeError(f"attention expects width {layer['attn.wq'].shape[0]}, got {d}")

    q = _split_heads(nn.matmul(x, layer["attn.wq"]), n_heads)
    k = _split_heads(nn.matmul(x, layer["attn.wk"]), n_heads)
    v = _split_heads(nn.matmul(x, layer["attn.wv"]), n_heads)

    scores = nn.scale(nn.matmul(q, nn.transpose(k)), 1.0 / math.sqrt(d // n_heads))
    weights = nn.softmax_rows(scores)
    context = _merge_heads(nn.matmul(weights, v))
    out = nn.add(x, nn.matmul(context, layer["attn.wo"]))
    return (out, weights) if return_weights else out


def feed_forward(x: Tensor, layer: Dict[str, Tensor]) -> Tensor:
    """Position-wise ``linear -> GELU -> linear`` with a residual path."""
    hidden = nn.gelu(nn.add(nn.matmul(x, layer["ffn.w1"]), layer["ffn.b1"]))
    return nn.add(x, nn.add(nn.matmul(hidden, layer["ffn.w2"]), layer["ffn.b2"]))


def encoder_layer(x: Tensor, layer: Dict[str, Tensor], config: ModelConfig) -> Tensor:
    """Attention sublayer then feed-forward sublayer, each optionally normalized."""
    x = multi_head_attention(x, layer, config.n_heads)
    if config.use_layer_norm:
        x = nn.layer_norm(x, layer["norm1.gain"], layer["norm1.bias"])
    x = feed_forward(x, layer)
    if config.use_layer_norm:
        x = nn.layer_norm(x, layer["norm2.gain"], layer["norm2.bias"])
    return x


def embed(params: ModelParams, x: Tensor) -> Tensor:
    """Project the 5 features to ``d_model`` and add the position table."""
    h = nn.add(nn.matmul(x, params["embed.weight"]), params["embed.bias"])
    return nn.add(h, params["pos.table"])


def head(params: ModelParams, pooled: Tensor) -> Tensor:
    """Two-layer head: ReLU hidden layer then a single tanh neuron."""
    hidden = nn.relu(nn.add(nn.matmul(pooled, params["head.w1"]), params["head.b1"]))
    return nn.tanh(nn.add(nn.matmul(hidden, params["head.w2"]), params["head.b2"]))


def forward_tensor(params: ModelParams, x: Tensor) -> Tensor:
    """
    Differentiable forward pass over a ``[batch, seq, features]`` tensor.

    Returns:
        Tensor of shape ``[batch]`` with values in [-1, 1].
    """
    config = params.config
    if x.ndim != 3 or x.shape[1:] != (config.seq_len, config.in_features):
        raise ShapeError(
            f"expected windows of shape (n, {config.seq_len}, {config.in_features}), got {x.shape}"
        )
    h = embed(params, x)
    for index in range(config.n_layers):
        h = encoder_layer(h, params.layer(index), config)
    out = head(params, nn.mean(h, axis=1))
    return nn.reshape(out, (x.shape[0],))


def forward_batch(params: ModelParams, windows: np.ndarray) -> np.ndarray:
    """Predict a batch of normalized windows ``n x seq x features``."""
    windows = np.asarray(windows, dtype=np.float64)
    config = params.config
    if windows.ndim == 3 and windows.shape[0] == 0:
        if windows.shape[1:] != (config.seq_len, config.in_features):
            raise ShapeError(f"unexpected window shape {windows.shape}")
        return np.zeros(0)
    return forward_tensor(params, Tensor(windows)).data.copy()


def forward(params: ModelParams, window: np.ndarray) -> float:
    """Predict one normalized ``seq x features`` window."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2:
        raise ShapeError(f"expected a 2-d window, got shape {window.shape}")
    return float(forward_batch(params, window[None])[0])


def attention_maps(params: ModelParams, window: np.ndarray) -> List[np.ndarray]:
    """Per-layer attention weights ``[heads, seq, seq]`` for one window."""
    config = params.config
    h = embed(params, Tensor(np.asarray(window, dtype=np.float64)[None]))
    maps = []
    for index in range(config.n_layers):
        layer = params.layer(index)
        _, weights = multi_head_attention(h, layer, config.n_heads, return_weights=True)
        maps.append(weights.data[0].copy())
        h = encoder_layer(h, layer, config)
    return maps
