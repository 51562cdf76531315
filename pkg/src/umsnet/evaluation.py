"""Metric suite and model-cost accounting.

Accuracy is the fraction of correct predictions; Macro-F1 the unweighted
mean of per-class F1 (zero-denominator classes score 0).  Mult-adds count
multiply-accumulates of convolutions, linear maps, and attention matmuls
for one forward pass; normalizations and activations are excluded by
convention.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass

import numpy as np

from .data import SlicedSample, labels_array, stack_sensor_arrays
from .errors import ContractError
from .layers import Conv1d, Linear
from .lsr import LsrStack
from .model import UMSNet
from .tensor import no_grad


# -- classification metrics --------------------------------------------------


def confusion_matrix(predictions, labels, num_classes: int) -> np.ndarray:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise ContractError(
            f"length mismatch: {predictions.shape} predictions vs {labels.shape} labels"
        )
    if predictions.size == 0:
        raise ContractError("empty prediction list")
    if predictions.min() < 0 or predictions.max() >= num_classes \
            or labels.min() < 0 or labels.max() >= num_classes:
        raise ContractError(f"class index out of range [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, predictions), 1)
    return counts


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ContractError(
            f"length mismatch: {predictions.shape} predictions vs {labels.shape} labels"
        )
    if predictions.size == 0:
        raise ContractError("empty prediction list")
    return float(np.mean(predictions == labels))


def macro_f1(predictions, labels, num_classes: int | None = None) -> tuple[float, list[float]]:
    """Unweighted mean of per-class F1.

    With ``num_classes`` the average runs over all class indices [0, C);
    without it, only over classes present in the predictions or labels.
    """
    if num_classes is None:
        classes = sorted(set(np.asarray(predictions).tolist())
                         | set(np.asarray(labels).tolist()))
    else:
        classes = range(num_classes)
    counts = confusion_matrix(predictions, labels, max(classes) + 1)
    per_class = []
    for c in classes:
        tp = counts[c, c]
        fp = counts[:, c].sum() - tp
        fn = counts[c, :].sum() - tp
        denom = 2 * tp + fp + fn
        per_class.append(2.0 * tp / denom if denom else 0.0)
    return float(np.mean(per_class)), per_class


# -- model predictions --------------------------------------------------------


def predict(model: UMSNet, samples: list[SlicedSample], batch_size: int = 64) -> np.ndarray:
    """Eval-mode argmax predictions, batched."""
    model.eval()
    preds = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            logits = model.forward(stack_sensor_arrays(chunk))
            preds.append(logits.data.argmax(axis=1))
    return np.concatenate(preds)


# -- cost accounting -----------------------------------------------------------


def _conv_macs(conv: Conv1d, batch: int, length: int) -> tuple[int, int]:
    t_out = conv.out_length(length)
    macs = batch * conv.out_channels * t_out * (conv.in_channels // conv.groups) \
        * conv.kernel_size
    return macs, t_out


def _stack_cost_rows(prefix: str, stack: LsrStack, batch: int, length: int):
    rows = []
    macs, length = _conv_macs(stack.stem, batch, length)
    rows.append((f"{prefix}.stem", macs))
    for s in range(4):
        for b, block in enumerate(stack.stages[s].blocks):
            macs = 0
            for conv in (block.dwconv, block.pwconv1, block.pwconv2):
                m, _ = _conv_macs(conv, batch, length)
                macs += m
            rows.append((f"{prefix}.stages.{s}.blocks.{b}", macs))
        if s < 3:
            macs, length = _conv_macs(stack.downsamples[s].conv, batch, length)
            rows.append((f"{prefix}.downsamples.{s}", macs))
    return rows, length


def mult_adds_breakdown(model: UMSNet, batch: int = 1) -> list[tuple[str, int]]:
    """Per-layer multiply-accumulate counts for one forward pass."""
    cfg = model.config
    rows = []
    bk = batch * cfg.K
    for i, spec in enumerate(cfg.sensors):
        sensor_rows, _ = _stack_cost_rows(
            f"sensor_stacks.{i}", model.sensor_stacks[i], bk, spec.samples_per_slice
        )
        rows.extend(sensor_rows)
    multi_rows, _ = _stack_cost_rows("multi_stack", model.multi_stack, bk,
                                     cfg.fused_length())
    rows.extend(multi_rows)
    rows.append(("embed", bk * cfg.multi_widths[3] * cfg.model_dim))

    seq_len = cfg.K + 1
    d = cfg.model_dim
    for i, layer in enumerate(model.encoder):
        proj = 4 * batch * seq_len * d * d
        attn_matmuls = 2 * batch * seq_len * seq_len * d  # QK^T and weights*V
        mlp = 2 * batch * seq_len * d * layer.fc1.out_features
        rows.append((f"encoder.{i}.attn", proj + attn_matmuls))
        rows.append((f"encoder.{i}.mlp", mlp))
    rows.append(("head", batch * d * cfg.num_classes))
    return rows


def count_mult_adds(model: UMSNet, batch: int = 1) -> int:
    return sum(macs for _, macs in mult_adds_breakdown(model, batch))


def parameter_breakdown(model) -> list[tuple[str, int]]:
    """Trainable parameter counts grouped by owning module."""
    groups: dict[str, int] = {}
    for name, p in model.named_parameters():
        if not p.trainable:
            continue
        module = name.rsplit(".", 1)[0] if "." in name else name
        groups[module] = groups.get(module, 0) + p.size
    return sorted(groups.items())


def count_params(model) -> int:
    return sum(p.size for p in model.parameters() if p.trainable)


def time_inference(model: UMSNet, repeats: int = 10, warmup: int = 3) -> float:
    """Median wall-clock milliseconds for a single-sample eval forward pass.

    Numbers depend on the host machine and are not comparable across hardware.
    """
    if repeats < 5:
        raise ContractError("repeats must be >= 5")
    cfg = model.config
    arrays = [
        np.zeros((1, cfg.K, s.channels, s.samples_per_slice), dtype=np.float32)
        for s in cfg.sensors
    ]
    model.eval()
    with no_grad():
        for _ in range(warmup):
            model.forward(arrays)
        durations = []
        for _ in range(repeats):
            start = time.perf_counter()
            model.forward(arrays)
            durations.append((time.perf_counter() - start) * 1000.0)
    return float(np.median(durations))


# -- report ---------------------------------------------------------------------


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    per_class_f1: list[float]
    params: int
    mult_adds: int
    time_ms_median: float | None
    config_fingerprint: str

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "per_class_f1": self.per_class_f1,
            "params": self.params,
            "mult_adds": self.mult_adds,
            "time_ms_median": self.time_ms_median,
            "config_fingerprint": self.config_fingerprint,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def config_fingerprint(config) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def evaluate(model: UMSNet, samples: list[SlicedSample], batch_size: int = 64,
             include_time: bool = False) -> MetricsReport:
    """Full metric report: predictions, accuracy, macro-F1, and cost."""
    if not samples:
        raise ContractError("cannot evaluate on an empty sample list")
    preds = predict(model, samples, batch_size)
    labels = labels_array(samples)
    macro, per_class = macro_f1(preds, labels, model.config.num_classes)
    return MetricsReport(
        accuracy=accuracy(preds, labels),
        macro_f1=macro,
        per_class_f1=per_class,
        params=count_params(model),
        mult_adds=count_mult_adds(model),
        time_ms_median=time_inference(model) if include_time else None,
        config_fingerprint=config_fingerprint(model.config),
    )
