"""Full UMSNet assembly: per-sensor feature stacks, fusion, the shared
multi-sensor stack, and the transformer sequence classifier.

A forward pass takes one array per sensor shaped (B, K, channels, samples)
and runs three stages: per-slice single-sensor feature extraction (weights
shared across slices, separate per sensor), flatten-and-concatenate fusion
into an N-channel map per slice, and a class-token transformer over the K
slice embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, DimensionError
from .layers import (
    Linear,
    Module,
    ModuleList,
    TransformerEncoderLayer,
    LayerNorm,
    add_position_and_class,
)
from .lsr import LsrStack, StageConfig
from .rng import Rng
from .tensor import Parameter, Tensor, concat, reshape, tmean

VARIANT_DEPTHS = {"A": [2, 2, 2, 2], "B": [2, 2, 6, 2], "C": [2, 2, 18, 2]}
VARIANT_ENCODER_DEPTH = {"A": 3, "B": 6, "C": 6}

DEFAULT_SINGLE_WIDTHS = [32, 64, 128, 256]
DEFAULT_MULTI_WIDTHS = [64, 128, 256, 512]


@dataclass
class SensorSpec:
    """One sensor's channel count and per-slice sample count."""

    name: str
    channels: int
    samples_per_slice: int = 8

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigError(f"sensor {self.name!r} needs >= 1 channel")
        if self.samples_per_slice < 8 or self.samples_per_slice % 8:
            raise ConfigError(
                f"sensor {self.name!r}: samples_per_slice must be a multiple of 8 "
                f"(three downsamples), got {self.samples_per_slice}"
            )


@dataclass
class ModelConfig:
    sensors: list[SensorSpec]
    num_classes: int
    K: int
    variant: str = "custom"
    single_depths: list[int] = field(default_factory=lambda: [2, 2, 2, 2])
    multi_depths: list[int] = field(default_factory=lambda: [2, 2, 2, 2])
    single_widths: list[int] = field(default_factory=lambda: list(DEFAULT_SINGLE_WIDTHS))
    multi_widths: list[int] = field(default_factory=lambda: list(DEFAULT_MULTI_WIDTHS))
    transformer_depth: int = 3
    model_dim: int = 128
    num_heads: int = 4
    dropout: float = 0.1
    layer_scale_init: float = 1e-6
    survival_final: float = 0.5
    norm: str = "batch"

    def __post_init__(self):
        if not self.sensors:
            raise ConfigError("model needs at least one sensor")
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.model_dim % self.num_heads:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )
        # fused map length must survive the multi-sensor stack's downsamples
        fused = self.fused_length()
        if fused < 8 or fused % 8:
            raise ConfigError(
                f"fused feature length {fused} must be a positive multiple of 8; "
                "adjust single-stage widths or samples_per_slice"
            )

    def single_stage(self, sensor_index: int) -> StageConfig:
        return StageConfig(
            depths=list(self.single_depths),
            widths=list(self.single_widths),
            input_channels=self.sensors[sensor_index].channels,
        )

    def multi_stage(self) -> StageConfig:
        return StageConfig(
            depths=list(self.multi_depths),
            widths=list(self.multi_widths),
            input_channels=len(self.sensors),
        )

    def fused_length(self) -> int:
        spatial = self.sensors[0].samples_per_slice // 8
        return self.single_widths[3] * spatial

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, blob: dict) -> "ModelConfig":
        blob = dict(blob)
        blob["sensors"] = [SensorSpec(**s) for s in blob["sensors"]]
        return cls(**blob)


class UMSNet(Module):
    """Three-stage multi-sensor classifier over sliced windows."""

    def __init__(self, config: ModelConfig, rng: Rng | None = None, dtype=np.float32):
        super().__init__()
        rng = rng or Rng(0)
        self.config = config
        lengths = {s.samples_per_slice for s in config.sensors}
        if len(lengths) != 1:
            raise ConfigError("all sensors must share samples_per_slice")

        self.sensor_stacks = ModuleList(
            LsrStack(config.single_stage(i), survival_final=config.survival_final,
                     layer_scale_init=config.layer_scale_init, norm=config.norm,
                     rng=rng, dtype=dtype)
            for i in range(len(config.sensors))
        )
        self.multi_stack = LsrStack(
            config.multi_stage(), survival_final=config.survival_final,
            layer_scale_init=config.layer_scale_init, norm=config.norm,
            rng=rng, dtype=dtype,
        )
        self.embed = Linear(config.multi_widths[3], config.model_dim, rng=rng, dtype=dtype)
        self.pos_embedding = Parameter(
            rng.truncated_normal(0.02, (config.K + 1, config.model_dim)).astype(dtype)
        )
        self.cls_token = Parameter(
            rng.truncated_normal(0.02, (1, config.model_dim)).astype(dtype)
        )
        self.encoder = ModuleList(
            TransformerEncoderLayer(config.model_dim, config.num_heads,
                                    dropout_rate=config.dropout, rng=rng, dtype=dtype)
            for _ in range(config.transformer_depth)
        )
        self.final_norm = LayerNorm(config.model_dim, dtype=dtype)
        self.head = Linear(config.model_dim, config.num_classes, rng=rng, dtype=dtype)

    # -- stage 1 -------------------------------------------------------------

    def single_sensor_features(self, slices: Tensor, sensor_index: int) -> Tensor:
        """(B*K, channels_i, samples) -> (B*K, C_s, samples/8) for one sensor."""
        if not 0 <= sensor_index < len(self.config.sensors):
            raise ConfigError(f"unknown sensor index {sensor_index}")
        spec = self.config.sensors[sensor_index]
        if slices.shape[1] != spec.channels:
            raise DimensionError(
                f"sensor {spec.name!r} expects {spec.channels} channels, "
                f"got shape {slices.shape}"
            )
        return self.sensor_stacks[sensor_index].forward(slices, self._rng)

    # -- stage 2 -------------------------------------------------------------

    @staticmethod
    def fuse_sensors(per_sensor: list[Tensor]) -> Tensor:
        """Flatten each sensor map and stack the N vectors as channels."""
        shapes = {t.shape for t in per_sensor}
        if len(shapes) != 1:
            raise DimensionError(f"sensor feature shapes differ: {sorted(shapes)}")
        bk, c_s, spatial = per_sensor[0].shape
        flat = [reshape(t, (bk, 1, c_s * spatial)) for t in per_sensor]
        return concat(flat, axis=1)

    def multi_sensor_features(self, fused: Tensor) -> Tensor:
        """(B*K, N, M) -> one (B*K, model_dim) embedding per slice."""
        h = self.multi_stack.forward(fused, self._rng)
        pooled = tmean(h, axis=2)  # global average over the spatial axis
        return self.embed.forward(pooled)

    # -- stage 3 -------------------------------------------------------------

    def classify_sequence(self, slice_embeddings: Tensor) -> Tensor:
        """(B, K, model_dim) -> unnormalized logits (B, num_classes)."""
        if slice_embeddings.shape[1] != self.config.K:
            raise DimensionError(
                f"model built for K={self.config.K}, got {slice_embeddings.shape[1]} slices"
            )
        seq = add_position_and_class(slice_embeddings, self.pos_embedding, self.cls_token)
        for layer in self.encoder:
            seq = layer.forward(seq, self._rng)
        token0 = self.final_norm.forward(seq[:, 0, :])
        return self.head.forward(token0)

    # -- full forward ----------------------------------------------------------

    def forward(self, sensor_arrays, rng: Rng | None = None) -> Tensor:
        """sensor_arrays: one Tensor/ndarray per sensor, (B, K, channels, samples)."""
        cfg = self.config
        if len(sensor_arrays) != len(cfg.sensors):
            raise DimensionError(
                f"model has {len(cfg.sensors)} sensors, got {len(sensor_arrays)} inputs"
            )
        self._rng = rng
        tensors = []
        batch = None
        for spec, arr in zip(cfg.sensors, sensor_arrays):
            t = arr if isinstance(arr, Tensor) else Tensor(arr)
            if t.ndim != 4 or t.shape[1] != cfg.K or t.shape[2] != spec.channels \
                    or t.shape[3] != spec.samples_per_slice:
                raise DimensionError(
                    f"sensor {spec.name!r} expects (B, {cfg.K}, {spec.channels}, "
                    f"{spec.samples_per_slice}), got {t.shape}"
                )
            if batch is None:
                batch = t.shape[0]
            elif t.shape[0] != batch:
                raise DimensionError(f"sensor {spec.name!r} batch size differs")
            tensors.append(reshape(t, (batch * cfg.K, spec.channels, spec.samples_per_slice)))

        features = [self.single_sensor_features(t, i) for i, t in enumerate(tensors)]
        fused = self.fuse_sensors(features)
        embeddings = self.multi_sensor_features(fused)
        embeddings = reshape(embeddings, (batch, cfg.K, cfg.model_dim))
        logits = self.classify_sequence(embeddings)
        self._rng = None
        return logits

    _rng = None


def hhar_profile(samples_per_slice=8) -> tuple[list[SensorSpec], int]:
    """HHAR: phone accelerometer + gyroscope (3 axes each), 6 activities."""
    sensors = [
        SensorSpec("accelerometer", 3, samples_per_slice),
        SensorSpec("gyroscope", 3, samples_per_slice),
    ]
    return sensors, 6


def mhealth_profile(samples_per_slice=8) -> tuple[list[SensorSpec], int]:
    """MHEALTH: accel/gyro/magnetometer (3 axes) + 2-lead ECG, 7 activities."""
    sensors = [
        SensorSpec("accelerometer", 3, samples_per_slice),
        SensorSpec("gyroscope", 3, samples_per_slice),
        SensorSpec("magnetometer", 3, samples_per_slice),
        SensorSpec("ecg", 2, samples_per_slice),
    ]
    return sensors, 7


def build_config(variant, sensors, num_classes, K, single_widths=None,
                 multi_widths=None, model_dim=128, num_heads=4, dropout=0.1,
                 norm="batch") -> ModelConfig:
    variant = variant.upper() if variant in ("a", "b", "c") else variant
    if variant not in ("A", "B", "C", "custom"):
        raise ConfigError(f"unknown variant {variant!r} (expected A, B, C, or custom)")
    if variant == "custom":
        depths = [2, 2, 2, 2]
        encoder_depth = 3
    else:
        depths = VARIANT_DEPTHS[variant]
        encoder_depth = VARIANT_ENCODER_DEPTH[variant]
    return ModelConfig(
        sensors=list(sensors),
        num_classes=num_classes,
        K=K,
        variant=variant,
        single_depths=list(depths),
        multi_depths=list(depths),
        single_widths=list(single_widths or DEFAULT_SINGLE_WIDTHS),
        multi_widths=list(multi_widths or DEFAULT_MULTI_WIDTHS),
        transformer_depth=encoder_depth,
        model_dim=model_dim,
        num_heads=num_heads,
        dropout=dropout,
        norm=norm,
    )


def build_model(variant, sensors, num_classes, K, seed=0, dtype=np.float32,
                **config_kwargs) -> tuple[ModelConfig, UMSNet]:
    """Construct a named variant (A/B/C, or custom) with initialized parameters."""
    config = build_config(variant, sensors, num_classes, K, **config_kwargs)
    model = UMSNet(config, rng=Rng(seed), dtype=dtype)
    return config, model
