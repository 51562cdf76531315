"""Lightweight sensor residual (LSR) blocks and stacked stages.

An LSR block keeps exactly one normalization and one activation:
depthwise conv (k=3, groups == channels) -> norm -> 1x1 expand (4x) ->
GELU -> 1x1 project, with a learnable per-channel residual scale and
per-sample stochastic depth during training.  Stages are joined by
BatchNorm + kernel-2 stride-2 downsample convolutions that halve the
time axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .layers import BatchNorm1d, Conv1d, LayerNorm, Module, ModuleList, gelu
from .rng import Rng
from .tensor import Parameter, Tensor, reshape, swapaxes


@dataclass
class StageConfig:
    """Depths and widths for a four-stage LSR stack."""

    depths: list[int]
    widths: list[int]
    input_channels: int

    def __post_init__(self):
        if len(self.depths) != 4 or len(self.widths) != 4:
            raise ConfigError("stage config needs exactly 4 depths and 4 widths")
        if any(d < 1 for d in self.depths) or any(w < 1 for w in self.widths):
            raise ConfigError("depths and widths must be positive")

    @property
    def num_blocks(self) -> int:
        return sum(self.depths)


class LsrBlock(Module):
    """Shape-preserving residual block over (B, C, T) inputs."""

    def __init__(self, channels, survival_prob=1.0, layer_scale_init=1e-6,
                 norm="batch", rescale_at_eval=False, rng: Rng | None = None,
                 dtype=np.float32):
        super().__init__()
        if not 0.0 < survival_prob <= 1.0:
            raise ConfigError(f"survival_prob must be in (0, 1], got {survival_prob}")
        self.channels = channels
        self.survival_prob = survival_prob
        self.rescale_at_eval = rescale_at_eval
        self.dwconv = Conv1d(channels, channels, 3, padding=1, groups=channels,
                             rng=rng, dtype=dtype)
        if norm == "batch":
            self.norm = BatchNorm1d(channels, dtype=dtype)
        elif norm == "layer":
            self.norm = LayerNorm(channels, dtype=dtype)
        else:
            raise ConfigError(f"unknown norm kind {norm!r}")
        self._norm_kind = norm
        self.pwconv1 = Conv1d(channels, 4 * channels, 1, rng=rng, dtype=dtype)
        self.pwconv2 = Conv1d(4 * channels, channels, 1, rng=rng, dtype=dtype)
        self.layer_scale = Parameter(
            np.full(channels, layer_scale_init, dtype=dtype)
        )

    def _apply_norm(self, x: Tensor) -> Tensor:
        if self._norm_kind == "layer":
            # layer-norm runs over channels, so swap to (B, T, C) and back
            return swapaxes(self.norm.forward(swapaxes(x, 1, 2)), 1, 2)
        return self.norm.forward(x)

    def forward(self, x: Tensor, rng: Rng | None = None) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.shape[1] != self.channels:
            raise DimensionError(
                f"LSR block built for {self.channels} channels, input has shape {x.shape}"
            )
        h = self.dwconv.forward(x)
        h = self._apply_norm(h)
        h = gelu(self.pwconv1.forward(h))
        residual = self.pwconv2.forward(h)
        residual = residual * reshape(self.layer_scale, (1, self.channels, 1))
        if self.training:
            if rng is None:
                raise ConfigError("train-mode LSR block requires an rng")
            keep = rng.bernoulli(self.survival_prob, (x.shape[0], 1, 1)).astype(x.dtype)
            return x + residual * Tensor(keep)
        if self.rescale_at_eval:
            return x + residual * self.survival_prob
        return x + residual


class Downsample(Module):
    """BatchNorm then kernel-2 stride-2 conv: (B, C_in, T) -> (B, C_out, T/2)."""

    def __init__(self, in_channels, out_channels, rng: Rng | None = None,
                 dtype=np.float32):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.norm = BatchNorm1d(in_channels, dtype=dtype)
        self.conv = Conv1d(in_channels, out_channels, 2, stride=2, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[2] % 2:
            raise DimensionError(f"downsample requires even length, got shape {x.shape}")
        return self.conv.forward(self.norm.forward(x))


class LsrStack(Module):
    """Stem + four LSR stages with downsamples between consecutive stages.

    The time axis is halved three times, so the input length must be a
    positive multiple of 8.  Survival probability decays linearly from 1.0
    at the first block to ``survival_final`` at the last.
    """

    def __init__(self, config: StageConfig, survival_final=0.5, layer_scale_init=1e-6,
                 norm="batch", rng: Rng | None = None, dtype=np.float32):
        super().__init__()
        self.config = config
        self.stem = Conv1d(config.input_channels, config.widths[0], 1, rng=rng, dtype=dtype)
        total = config.num_blocks
        self.stages = ModuleList()
        self.downsamples = ModuleList()
        block_index = 0
        for s in range(4):
            blocks = ModuleList()
            for _ in range(config.depths[s]):
                if total > 1:
                    p = 1.0 - (1.0 - survival_final) * block_index / (total - 1)
                else:
                    p = 1.0
                blocks.append(
                    LsrBlock(config.widths[s], survival_prob=p,
                             layer_scale_init=layer_scale_init, norm=norm,
                             rng=rng, dtype=dtype)
                )
                block_index += 1
            self.stages.append(_StageWrapper(blocks))
            if s < 3:
                self.downsamples.append(
                    Downsample(config.widths[s], config.widths[s + 1], rng=rng, dtype=dtype)
                )

    @staticmethod
    def check_length(length: int):
        if length < 8 or length % 8:
            raise ConfigError(
                f"stack input length must be a positive multiple of 8, got {length}"
            )

    def out_length(self, length: int) -> int:
        return length // 8

    @property
    def out_channels(self) -> int:
        return self.config.widths[3]

    def forward(self, x: Tensor, rng: Rng | None = None) -> Tensor:
        self.check_length(x.shape[2])
        h = self.stem.forward(x)
        for s in range(4):
            for block in self.stages[s].blocks:
                h = block.forward(h, rng)
            if s < 3:
                h = self.downsamples[s].forward(h)
        return h

    def blocks(self):
        for stage in self.stages:
            yield from stage.blocks


class _StageWrapper(Module):
    """Names blocks under 'stageN.blocks.i' in the parameter tree."""

    def __init__(self, blocks: ModuleList):
        super().__init__()
        self.blocks = blocks
