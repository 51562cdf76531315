"""Loss, optimizers, the deterministic training loop, and checkpoints.

A run is fully determined by (seed, data, config): shuffling, stochastic
depth, and dropout all draw from one Philox stream, and checkpoints capture
parameters, optimizer slots, and the generator state bit-exactly, so an
interrupted run resumes identically to an uninterrupted one.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, asdict

import numpy as np

from .data import (
    DatasetSplit,
    apply_channel_stats,
    compute_channel_stats,
    labels_array,
    stack_sensor_arrays,
)
from .errors import ConfigError, ContractError, IntegrityError
from .evaluation import accuracy, macro_f1, predict
from .model import ModelConfig, UMSNet
from .rng import Rng
from .tensor import Tensor, backward, exp, log, no_grad, tmean, tsum

UMSN_MAGIC = b"UMSN"
UMSN_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 0.05
    optimizer: str = "adamw"
    lr_schedule: str = "cosine"
    momentum: float = 0.9
    seed: int = 0
    precision: str = "f32"
    normalize: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    def to_dict(self) -> dict:
        return asdict(self)


# -- loss -----------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood with a stable log-sum-exp."""
    labels = np.asarray(labels, dtype=np.int64)
    batch, num_classes = logits.shape
    if labels.shape != (batch,):
        raise ContractError(f"expected {batch} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ContractError(f"label out of range [0, {num_classes})")
    shifted = logits - logits.data.max(axis=1, keepdims=True)
    lse = log(tsum(exp(shifted), axis=1))
    onehot = np.zeros((batch, num_classes), dtype=logits.dtype)
    onehot[np.arange(batch), labels] = 1.0
    picked = tsum(shifted * Tensor(onehot), axis=1)
    return tmean(lse - picked)


# -- optimizers -------------------------------------------------------------------


class SGD:
    """SGD with momentum; decay is decoupled (applied to the weights directly)."""

    def __init__(self, params, momentum=0.9, weight_decay=0.0):
        self.params = [p for p in params if p.trainable]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def step(self, lr: float):
        self.step_count += 1
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad
            p.data = p.data - lr * v
            if self.weight_decay and p.data.ndim >= 2:
                p.data = p.data - lr * self.weight_decay * p.data

    def state_blobs(self):
        return {"velocity": self.velocity}

    def load_state_blobs(self, blobs):
        self.velocity = blobs["velocity"]


class AdamW:
    """AdamW: bias-corrected moments with decoupled weight decay.

    Decay is applied only to parameters with ndim >= 2 (weights), never to
    biases, norm parameters, or the residual scales.
    """

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = [p for p in params if p.trainable]
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def step(self, lr: float):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - lr * update
            if self.weight_decay and p.data.ndim >= 2:
                p.data = p.data - lr * self.weight_decay * p.data

    def state_blobs(self):
        return {"m": self.m, "v": self.v}

    def load_state_blobs(self, blobs):
        self.m = blobs["m"]
        self.v = blobs["v"]


def make_optimizer(model: UMSNet, config: TrainConfig):
    if config.optimizer == "sgd":
        return SGD(model.parameters(), momentum=config.momentum,
                   weight_decay=config.weight_decay)
    return AdamW(model.parameters(), weight_decay=config.weight_decay)


def schedule_lr(config: TrainConfig, step: int, total_steps: int) -> float:
    if config.lr_schedule == "constant" or total_steps <= 0:
        return config.learning_rate
    return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# -- checkpoints ------------------------------------------------------------------


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: dict[str, np.ndarray]          # end-of-training weights
    buffers: dict[str, np.ndarray]         # batch-norm running statistics
    best_params: dict[str, np.ndarray]     # best-test-accuracy weights
    best_buffers: dict[str, np.ndarray]
    optimizer_state: dict[str, list[np.ndarray]]
    epoch: int
    step: int
    best_epoch: int
    best_accuracy: float
    rng_state: str
    normalization: list | None = None


def _snapshot_params(model: UMSNet) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in model.named_parameters()}


def _snapshot_buffers(model: UMSNet) -> dict[str, np.ndarray]:
    return {name: owner._buffers[key].copy() for name, owner, key in model.named_buffers()}


def _restore_into(model: UMSNet, params: dict, buffers: dict):
    for name, p in model.named_parameters():
        if name not in params:
            raise IntegrityError(f"checkpoint missing parameter {name!r}")
        if params[name].shape != p.data.shape:
            raise ConfigError(f"checkpoint parameter {name!r} shape mismatch")
        p.data = params[name].copy()
        p.zero_grad()
    for name, owner, key in model.named_buffers():
        if name in buffers:
            owner.update_buffer(key, buffers[name].copy())


def save_checkpoint(ckpt: Checkpoint, path):
    """Container: magic 'UMSN', u32 version, JSON metadata, raw little-endian
    blobs in manifest order (name-sorted within each section)."""
    sections = [
        ("params", ckpt.params),
        ("buffers", ckpt.buffers),
        ("best_params", ckpt.best_params),
        ("best_buffers", ckpt.best_buffers),
    ]
    blobs = []
    manifest = []
    for section, blob_map in sections:
        for name in sorted(blob_map):
            arr = blob_map[name]
            manifest.append(
                {"section": section, "name": name, "shape": list(arr.shape),
                 "dtype": str(arr.dtype)}
            )
            blobs.append(np.ascontiguousarray(arr))
    for slot in sorted(ckpt.optimizer_state):
        for i, arr in enumerate(ckpt.optimizer_state[slot]):
            manifest.append(
                {"section": "optimizer", "name": f"{slot}.{i}",
                 "shape": list(arr.shape), "dtype": str(arr.dtype)}
            )
            blobs.append(np.ascontiguousarray(arr))

    norm = None
    if ckpt.normalization is not None:
        norm = [[mean.tolist(), std.tolist()] for mean, std in ckpt.normalization]
    meta = {
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "best_epoch": ckpt.best_epoch,
        "best_accuracy": ckpt.best_accuracy,
        "rng_state": ckpt.rng_state,
        "normalization": norm,
        "optimizer_slots": sorted(ckpt.optimizer_state),
        "optimizer_slot_sizes": {
            slot: len(ckpt.optimizer_state[slot]) for slot in ckpt.optimizer_state
        },
        "manifest": manifest,
    }
    payload = json.dumps(meta, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(UMSN_MAGIC)
    buf.write(struct.pack("<I", UMSN_VERSION))
    buf.write(struct.pack("<I", len(payload)))
    buf.write(payload)
    for arr in blobs:
        buf.write(arr.tobytes())
    from pathlib import Path

    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    from pathlib import Path

    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != UMSN_MAGIC:
        raise IntegrityError(f"{path}: not a UMSN checkpoint")
    version, json_len = struct.unpack("<II", raw[4:12])
    if version != UMSN_VERSION:
        raise IntegrityError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 12 + json_len:
        raise IntegrityError(f"{path}: truncated metadata")
    meta = json.loads(raw[12 : 12 + json_len])

    offset = 12 + json_len
    sections: dict[str, dict[str, np.ndarray]] = {
        "params": {}, "buffers": {}, "best_params": {}, "best_buffers": {},
        "optimizer": {},
    }
    for entry in meta["manifest"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * dtype.itemsize
        if len(raw) < offset + nbytes:
            raise IntegrityError(f"{path}: truncated blob {entry['name']!r}")
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(
            entry["shape"]
        ).copy()
        sections[entry["section"]][entry["name"]] = arr
        offset += nbytes
    if offset != len(raw):
        raise IntegrityError(f"{path}: trailing bytes after blobs")

    optimizer_state = {}
    for slot in meta["optimizer_slots"]:
        size = meta["optimizer_slot_sizes"][slot]
        optimizer_state[slot] = [sections["optimizer"][f"{slot}.{i}"] for i in range(size)]

    norm = meta["normalization"]
    if norm is not None:
        norm = [(np.array(mean), np.array(std)) for mean, std in norm]

    return Checkpoint(
        model_config=ModelConfig.from_dict(meta["model_config"]),
        train_config=TrainConfig(**meta["train_config"]),
        params=sections["params"],
        buffers=sections["buffers"],
        best_params=sections["best_params"],
        best_buffers=sections["best_buffers"],
        optimizer_state=optimizer_state,
        epoch=meta["epoch"],
        step=meta["step"],
        best_epoch=meta["best_epoch"],
        best_accuracy=meta["best_accuracy"],
        rng_state=meta["rng_state"],
        normalization=norm,
    )


def restore_model(ckpt: Checkpoint, which: str = "final") -> UMSNet:
    """Rebuild the model from a checkpoint ('final' or 'best' weights)."""
    model = UMSNet(ckpt.model_config, rng=Rng(0), dtype=ckpt.train_config.dtype)
    if which == "best":
        _restore_into(model, ckpt.best_params, ckpt.best_buffers)
    else:
        _restore_into(model, ckpt.params, ckpt.buffers)
    return model


# -- training loop ---------------------------------------------------------------


def _check_geometry(model: UMSNet, samples):
    cfg = model.config
    sample = samples[0]
    if len(sample.slices) != len(cfg.sensors):
        raise ConfigError(
            f"model has {len(cfg.sensors)} sensors, samples have {len(sample.slices)}"
        )
    for spec, block in zip(cfg.sensors, sample.slices):
        if block.shape != (cfg.K, spec.channels, spec.samples_per_slice):
            raise ConfigError(
                f"sensor {spec.name!r}: model expects slices of shape "
                f"({cfg.K}, {spec.channels}, {spec.samples_per_slice}), "
                f"data has {block.shape}"
            )


def train(model: UMSNet, split: DatasetSplit, config: TrainConfig,
          resume_from: Checkpoint | None = None,
          stop_after_epoch: int | None = None) -> tuple[Checkpoint, list[dict]]:
    """Run the training loop; returns the checkpoint and per-epoch history.

    The returned checkpoint holds both the final weights (used for resuming
    and by default for evaluation) and a copy of the best-test-accuracy
    weights.  ``stop_after_epoch`` interrupts the run early while keeping
    the lr schedule pinned to ``config.epochs``, so resuming from the
    resulting checkpoint continues an uninterrupted run exactly.
    """
    if not split.train or not split.test:
        raise ConfigError("both sides of the split must be non-empty")
    _check_geometry(model, split.train)
    dtype = config.dtype

    if resume_from is not None:
        _restore_into(model, resume_from.params, resume_from.buffers)
        normalization = resume_from.normalization
        rng = Rng.from_state_json(resume_from.rng_state)
        start_epoch = resume_from.epoch
        best = {
            "params": resume_from.best_params,
            "buffers": resume_from.best_buffers,
            "epoch": resume_from.best_epoch,
            "accuracy": resume_from.best_accuracy,
        }
    else:
        normalization = compute_channel_stats(split.train) if config.normalize else None
        rng = Rng(config.seed)
        start_epoch = 0
        best = {"params": _snapshot_params(model), "buffers": _snapshot_buffers(model),
                "epoch": -1, "accuracy": -1.0}

    train_samples = split.train
    test_samples = split.test
    if normalization is not None:
        train_samples = apply_channel_stats(train_samples, normalization)
        test_samples = apply_channel_stats(test_samples, normalization)

    optimizer = make_optimizer(model, config)
    if resume_from is not None:
        optimizer.load_state_blobs(
            {k: [a.copy() for a in v] for k, v in resume_from.optimizer_state.items()}
        )
        optimizer.step_count = resume_from.step

    n = len(train_samples)
    steps_per_epoch = (n + config.batch_size - 1) // config.batch_size
    total_steps = config.epochs * steps_per_epoch
    test_labels = labels_array(test_samples)

    end_epoch = config.epochs if stop_after_epoch is None else min(stop_after_epoch,
                                                                   config.epochs)
    history = []
    for epoch in range(start_epoch, end_epoch):
        model.train()
        order = rng.permutation(n)
        losses = []
        lr = config.learning_rate
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            chunk = [train_samples[i] for i in idx]
            arrays = [a.astype(dtype) for a in stack_sensor_arrays(chunk)]
            model.zero_grad()
            logits = model.forward(arrays, rng=rng)
            loss = cross_entropy(logits, labels_array(chunk))
            backward(loss)
            lr = schedule_lr(config, optimizer.step_count, total_steps)
            with no_grad():
                optimizer.step(lr)
            losses.append(loss.item())

        preds = predict(model, test_samples, config.batch_size)
        test_acc = accuracy(preds, test_labels)
        test_f1, _ = macro_f1(preds, test_labels, model.config.num_classes)
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "test_accuracy": test_acc,
                "test_macro_f1": test_f1,
                "lr": lr,
            }
        )
        if test_acc > best["accuracy"]:
            best = {"params": _snapshot_params(model),
                    "buffers": _snapshot_buffers(model),
                    "epoch": epoch, "accuracy": test_acc}

    ckpt = Checkpoint(
        model_config=model.config,
        train_config=config,
        params=_snapshot_params(model),
        buffers=_snapshot_buffers(model),
        best_params=best["params"],
        best_buffers=best["buffers"],
        optimizer_state=optimizer.state_blobs(),
        epoch=end_epoch,
        step=optimizer.step_count,
        best_epoch=best["epoch"],
        best_accuracy=best["accuracy"],
        rng_state=rng.state_json(),
        normalization=normalization,
    )
    return ckpt, history
