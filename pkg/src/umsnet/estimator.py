"""Scikit-learn style classifier facade over the multi-sensor network.

``X`` is a 4-d array (n_samples, K, total_channels, samples_per_slice);
``sensor_channels`` says how the channel axis splits into sensors (one
sensor with all channels by default).  Follows the sklearn estimator
contract: all constructor arguments are stored verbatim, state learned by
``fit`` lives in trailing-underscore attributes, and ``get_params`` /
``set_params`` come from :class:`sklearn.base.BaseEstimator`.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .data import DatasetSplit, SlicedSample
from .errors import DimensionError
from .layers import softmax
from .model import SensorSpec, build_model
from .tensor import Tensor, no_grad
from .training import TrainConfig, restore_model, train


class UMSNetClassifier(BaseEstimator, ClassifierMixin):
    """Multi-sensor time-series classifier with fit/predict semantics."""

    def __init__(self, variant="A", sensor_channels=None,
                 single_widths=(8, 8, 16, 16), multi_widths=(16, 16, 32, 32),
                 model_dim=32, num_heads=4, dropout=0.1,
                 epochs=20, batch_size=32, learning_rate=1e-3, weight_decay=0.05,
                 optimizer="adamw", lr_schedule="cosine", normalize=True,
                 random_state=0):
        self.variant = variant
        self.sensor_channels = sensor_channels
        self.single_widths = single_widths
        self.multi_widths = multi_widths
        self.model_dim = model_dim
        self.num_heads = num_heads
        self.dropout = dropout
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.optimizer = optimizer
        self.lr_schedule = lr_schedule
        self.normalize = normalize
        self.random_state = random_state

    # -- helpers ----------------------------------------------------------

    def _validate_X(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float32)
        if X.ndim != 4:
            raise DimensionError(
                f"X must be (n_samples, K, channels, samples_per_slice), got {X.shape}"
            )
        return X

    def _sensor_split(self, total_channels) -> list[int]:
        channels = list(self.sensor_channels or [total_channels])
        if sum(channels) != total_channels:
            raise DimensionError(
                f"sensor_channels {channels} do not sum to input channels {total_channels}"
            )
        return channels

    def _to_samples(self, X, y=None) -> list[SlicedSample]:
        channels = self._sensor_split(X.shape[2])
        offsets = np.cumsum([0] + channels)
        samples = []
        for i in range(X.shape[0]):
            slices = [
                np.ascontiguousarray(X[i, :, offsets[j] : offsets[j + 1], :])
                for j in range(len(channels))
            ]
            label = int(self._class_index_[y[i]]) if y is not None else 0
            samples.append(SlicedSample(slices, label, user_id="X", window_seconds=0.0))
        return samples

    # -- sklearn API --------------------------------------------------------

    def fit(self, X, y):
        X = self._validate_X(X)
        y = np.asarray(y)
        if len(y) != X.shape[0]:
            raise DimensionError(f"{X.shape[0]} samples but {len(y)} labels")
        self.classes_ = np.unique(y)
        self._class_index_ = {c: i for i, c in enumerate(self.classes_)}

        _, k, total_channels, sps = X.shape
        channels = self._sensor_split(total_channels)
        sensors = [SensorSpec(f"sensor{j}", c, sps) for j, c in enumerate(channels)]
        _, model = build_model(
            self.variant, sensors, len(self.classes_), k,
            seed=self.random_state,
            single_widths=list(self.single_widths),
            multi_widths=list(self.multi_widths),
            model_dim=self.model_dim, num_heads=self.num_heads,
            dropout=self.dropout,
        )
        config = TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size,
            learning_rate=self.learning_rate, weight_decay=self.weight_decay,
            optimizer=self.optimizer, lr_schedule=self.lr_schedule,
            seed=self.random_state, normalize=self.normalize,
        )
        samples = self._to_samples(X, y)
        # no held-out users here: per-epoch metrics in history_ are train-set
        split = DatasetSplit(train=samples, test=samples, held_out_user="")
        ckpt, history = train(model, split, config)
        self.model_ = restore_model(ckpt, which="final")
        self.normalization_ = ckpt.normalization
        self.history_ = history
        self.n_features_in_ = total_channels
        return self

    def _forward(self, X) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before predict")
        X = self._validate_X(X)
        samples = self._to_samples(X)
        if self.normalization_ is not None:
            from .data import apply_channel_stats

            samples = apply_channel_stats(samples, self.normalization_)
        self.model_.eval()
        logits = []
        with no_grad():
            for start in range(0, len(samples), self.batch_size):
                chunk = samples[start : start + self.batch_size]
                arrays = [
                    np.stack([s.slices[j] for s in chunk])
                    for j in range(len(chunk[0].slices))
                ]
                logits.append(self.model_.forward(arrays).data)
        return np.concatenate(logits)

    def predict(self, X):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before predict")
        return self.classes_[self._forward(X).argmax(axis=1)]

    def predict_proba(self, X):
        return softmax(Tensor(self._forward(X))).data
