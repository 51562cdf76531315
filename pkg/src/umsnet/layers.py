"""Network primitives: 1-D (grouped) convolution, normalization, GELU,
linear, softmax, multi-head self-attention, and token/position embedding.

Layers are small Module objects owning their Parameters; functional forms
are provided where a layer is stateless.  Every op is differentiable via
the tape in :mod:`umsnet.tensor`.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, DimensionError
from .rng import Rng
from .tensor import (
    Parameter,
    Tensor,
    _make,
    _wrap,
    broadcast_to,
    concat,
    erf,
    exp,
    matmul,
    no_grad,
    reshape,
    sqrt,
    swapaxes,
    tmean,
    transpose,
    tsum,
)


class Module:
    """Minimal container tracking child modules, parameters, and buffers."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._modules[key] = value
        elif isinstance(value, ModuleList):
            self._modules[key] = value
        object.__setattr__(self, key, value)

    def register_buffer(self, key, value: np.ndarray):
        self._buffers[key] = value
        object.__setattr__(self, key, value)

    def update_buffer(self, key, value: np.ndarray):
        self._buffers[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix=""):
        for key, p in self._params.items():
            name = f"{prefix}{key}"
            p.name = name
            yield name, p
        for key, mod in self._modules.items():
            yield from mod.named_parameters(prefix=f"{prefix}{key}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for key, b in self._buffers.items():
            yield f"{prefix}{key}", self, key
        for key, mod in self._modules.items():
            yield from mod.named_buffers(prefix=f"{prefix}{key}.")

    def named_modules(self, prefix=""):
        yield prefix.rstrip("."), self
        for key, mod in self._modules.items():
            yield from mod.named_modules(prefix=f"{prefix}{key}.")

    def train(self):
        object.__setattr__(self, "training", True)
        for mod in self._modules.values():
            mod.train()
        return self

    def eval(self):
        object.__setattr__(self, "training", False)
        for mod in self._modules.values():
            mod.eval()
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def to_dtype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        for _, owner, key in self.named_buffers():
            owner.update_buffer(key, owner._buffers[key].astype(dtype))
        return self


class ModuleList:
    """Ordered list of child modules, registered under their index."""

    def __init__(self, modules=()):
        self._items = list(modules)

    def append(self, module):
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def named_parameters(self, prefix=""):
        for i, mod in enumerate(self._items):
            yield from mod.named_parameters(prefix=f"{prefix}{i}.")

    def named_buffers(self, prefix=""):
        for i, mod in enumerate(self._items):
            yield from mod.named_buffers(prefix=f"{prefix}{i}.")

    def named_modules(self, prefix=""):
        for i, mod in enumerate(self._items):
            yield from mod.named_modules(prefix=f"{prefix}{i}.")

    def train(self):
        for mod in self._items:
            mod.train()

    def eval(self):
        for mod in self._items:
            mod.eval()


# -- functional ops ----------------------------------------------------------


def conv1d(x: Tensor, weight: Tensor, bias, stride=1, padding=0, groups=1) -> Tensor:
    """Grouped 1-D convolution (cross-correlation) over the last axis.

    x: (B, C_in, T); weight: (C_out, C_in/groups, k); bias: (C_out,) or None.
    Output length T_out = floor((T + 2*padding - k) / stride) + 1.
    """
    x, weight = _wrap(x), _wrap(weight)
    batch, c_in, length = x.shape
    c_out, c_in_g, kernel = weight.shape
    if c_in % groups or c_out % groups:
        raise ConfigError(f"channels ({c_in}->{c_out}) not divisible by groups={groups}")
    if c_in_g != c_in // groups:
        raise DimensionError(
            f"weight expects {c_in_g * groups} input channels, input has {c_in}"
        )
    padded_len = length + 2 * padding
    if padded_len < kernel:
        raise DimensionError(f"input length {length} (+2*{padding} pad) < kernel {kernel}")
    t_out = (padded_len - kernel) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, kernel, axis=2)[:, :, ::stride]
    # windows: (B, C_in, T_out, k) -> grouped (B, G, C_in/G, T_out, k)
    win_g = windows.reshape(batch, groups, c_in_g, t_out, kernel)
    w_g = weight.data.reshape(groups, c_out // groups, c_in_g, kernel)
    out = np.einsum("bgitk,goik->bgot", win_g, w_g, optimize=True)
    out = out.reshape(batch, c_out, t_out)
    if bias is not None:
        bias = _wrap(bias)
        out = out + bias.data.reshape(1, c_out, 1)

    def vjp(g):
        g_g = g.reshape(batch, groups, c_out // groups, t_out)
        gw = np.einsum("bgitk,bgot->goik", win_g, g_g, optimize=True)
        gw = gw.reshape(c_out, c_in_g, kernel)
        gwin = np.einsum("bgot,goik->bgitk", g_g, w_g, optimize=True)
        gwin = gwin.reshape(batch, c_in, t_out, kernel)
        gxp = np.zeros((batch, c_in, padded_len), dtype=g.dtype)
        for j in range(kernel):
            gxp[:, :, j : j + t_out * stride : stride] += gwin[:, :, :, j]
        gx = gxp[:, :, padding : padded_len - padding] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, vjp)


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU: x * Phi(x)."""
    x = _wrap(x)
    return x * 0.5 * (erf(x * (1.0 / math.sqrt(2.0))) + 1.0)


def softmax(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    x = _wrap(x)
    shift = x - x.data.max(axis=-1, keepdims=True)
    num = exp(shift)
    return num / tsum(num, axis=-1, keepdims=True)


def linear(x: Tensor, weight: Tensor, bias=None) -> Tensor:
    """Affine map over the trailing axis; weight is (out, in)."""
    x, weight = _wrap(x), _wrap(weight)
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"linear expects trailing dim {weight.shape[1]}, got input {x.shape}"
        )
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1]))
    out = matmul(flat, transpose(weight))
    if bias is not None:
        out = out + bias
    return reshape(out, lead + (weight.shape[0],))


def dropout(x: Tensor, rate: float, rng: Rng, training: bool) -> Tensor:
    """Inverted dropout; identity when eval or rate == 0."""
    if not training or rate <= 0.0:
        return x
    keep = 1.0 - rate
    mask = rng.bernoulli(keep, x.shape).astype(x.dtype) / keep
    return x * Tensor(mask)


def add_position_and_class(tokens: Tensor, pos: Parameter, cls: Parameter) -> Tensor:
    """Prepend the class token and add position embeddings.

    tokens: (B, K, D); pos: (K+1, D); cls: (1, D) -> (B, K+1, D).
    """
    batch, k, dim = tokens.shape
    if pos.shape[0] != k + 1:
        raise DimensionError(f"position table has {pos.shape[0]} rows, need K+1={k + 1}")
    cls_row = broadcast_to(reshape(cls, (1, 1, dim)), (batch, 1, dim))
    seq = concat([cls_row, tokens], axis=1)
    return seq + reshape(pos, (1, k + 1, dim))


# -- layer modules -----------------------------------------------------------


def _kaiming_normal(rng: Rng, shape, fan_in, dtype):
    std = math.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, shape).astype(dtype)


class Conv1d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 groups=1, bias=True, rng: Rng | None = None, dtype=np.float32):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise ConfigError(
                f"conv channels ({in_channels}->{out_channels}) must divide groups={groups}"
            )
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.groups = groups
        rng = rng or Rng(0)
        fan_in = (in_channels // groups) * kernel_size
        self.weight = Parameter(
            _kaiming_normal(rng, (out_channels, in_channels // groups, kernel_size),
                            fan_in, dtype)
        )
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype)) if bias else None

    def out_length(self, length):
        return (length + 2 * self.padding - self.kernel_size) // self.stride + 1

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise DimensionError(
                f"conv expects {self.in_channels} channels, input has shape {x.shape}"
            )
        return conv1d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class BatchNorm1d(Module):
    """Per-channel normalization over (batch, time) for (B, C, T) inputs."""

    def __init__(self, num_features, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        if eps <= 0:
            raise ConfigError("batch-norm eps must be positive")
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.weight = Parameter(np.ones(num_features, dtype=dtype))
        self.bias = Parameter(np.zeros(num_features, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(num_features, dtype=dtype))
        self.register_buffer("running_var", np.ones(num_features, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.num_features:
            raise DimensionError(
                f"batch-norm over {self.num_features} channels, input has shape {x.shape}"
            )
        c = self.num_features
        if self.training:
            mean = tmean(x, axis=(0, 2), keepdims=True)
            var = tmean((x - mean) * (x - mean), axis=(0, 2), keepdims=True)
            with no_grad():
                m = self.momentum
                self.update_buffer(
                    "running_mean",
                    ((1 - m) * self.running_mean + m * mean.data.reshape(c)).astype(x.dtype),
                )
                self.update_buffer(
                    "running_var",
                    ((1 - m) * self.running_var + m * var.data.reshape(c)).astype(x.dtype),
                )
        else:
            mean = Tensor(self.running_mean.reshape(1, c, 1))
            var = Tensor(self.running_var.reshape(1, c, 1))
        xn = (x - mean) / sqrt(var + self.eps)
        return xn * reshape(self.weight, (1, c, 1)) + reshape(self.bias, (1, c, 1))


class LayerNorm(Module):
    """Normalization over the trailing axis, per position."""

    def __init__(self, num_features, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.weight = Parameter(np.ones(num_features, dtype=dtype))
        self.bias = Parameter(np.zeros(num_features, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.num_features:
            raise DimensionError(
                f"layer-norm over {self.num_features} features, input has shape {x.shape}"
            )
        mean = tmean(x, axis=-1, keepdims=True)
        var = tmean((x - mean) * (x - mean), axis=-1, keepdims=True)
        xn = (x - mean) / sqrt(var + self.eps)
        return xn * self.weight + self.bias


class Linear(Module):
    def __init__(self, in_features, out_features, bias=True, rng: Rng | None = None,
                 dtype=np.float32):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        rng = rng or Rng(0)
        self.weight = Parameter(
            _kaiming_normal(rng, (out_features, in_features), in_features, dtype)
        )
        self.bias = Parameter(np.zeros(out_features, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class MultiHeadAttention(Module):
    """Full bidirectional self-attention over (B, L, D) sequences."""

    def __init__(self, model_dim, num_heads, dropout_rate=0.0, rng: Rng | None = None,
                 dtype=np.float32):
        super().__init__()
        if model_dim % num_heads:
            raise ConfigError(f"model_dim {model_dim} not divisible by heads {num_heads}")
        self.model_dim = model_dim
        self.num_heads = num_heads
        self.head_dim = model_dim // num_heads
        self.dropout_rate = dropout_rate
        rng = rng or Rng(0)
        self.q_proj = Linear(model_dim, model_dim, rng=rng, dtype=dtype)
        self.k_proj = Linear(model_dim, model_dim, rng=rng, dtype=dtype)
        self.v_proj = Linear(model_dim, model_dim, rng=rng, dtype=dtype)
        self.out_proj = Linear(model_dim, model_dim, rng=rng, dtype=dtype)

    def _split_heads(self, x, batch, length):
        x = reshape(x, (batch, length, self.num_heads, self.head_dim))
        return transpose(x, (0, 2, 1, 3))  # (B, H, L, hd)

    def forward(self, x: Tensor, rng: Rng | None = None, return_weights=False):
        if x.shape[-1] != self.model_dim:
            raise DimensionError(
                f"attention expects model_dim {self.model_dim}, input has shape {x.shape}"
            )
        batch, length, _ = x.shape
        q = self._split_heads(self.q_proj.forward(x), batch, length)
        k = self._split_heads(self.k_proj.forward(x), batch, length)
        v = self._split_heads(self.v_proj.forward(x), batch, length)
        scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / math.sqrt(self.head_dim))
        weights = softmax(scores)  # (B, H, L, L), rows sum to 1
        attn = dropout(weights, self.dropout_rate, rng, self.training)
        ctx = matmul(attn, v)
        ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (batch, length, self.model_dim))
        out = self.out_proj.forward(ctx)
        if return_weights:
            return out, weights.data
        return out


class TransformerEncoderLayer(Module):
    """Pre-norm encoder layer: LN -> MHA -> residual; LN -> MLP -> residual."""

    def __init__(self, model_dim, num_heads, mlp_ratio=4, dropout_rate=0.1,
                 rng: Rng | None = None, dtype=np.float32):
        super().__init__()
        self.dropout_rate = dropout_rate
        self.norm1 = LayerNorm(model_dim, dtype=dtype)
        self.attn = MultiHeadAttention(model_dim, num_heads, dropout_rate, rng, dtype)
        self.norm2 = LayerNorm(model_dim, dtype=dtype)
        self.fc1 = Linear(model_dim, mlp_ratio * model_dim, rng=rng, dtype=dtype)
        self.fc2 = Linear(mlp_ratio * model_dim, model_dim, rng=rng, dtype=dtype)

    def forward(self, x: Tensor, rng: Rng | None = None) -> Tensor:
        x = x + self.attn.forward(self.norm1.forward(x), rng)
        h = self.fc2.forward(gelu(self.fc1.forward(self.norm2.forward(x))))
        h = dropout(h, self.dropout_rate, rng, self.training)
        return x + h
