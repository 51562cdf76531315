"""Deterministic random number generation.

All stochastic behaviour in the package (init, stochastic depth, dropout,
shuffling, synthetic data) flows through :class:`Rng`, a thin wrapper around
numpy's counter-based Philox4x64-10 bit generator.  Philox streams are
guaranteed bit-stable across platforms and numpy versions, so a given
(seed, draw count) always reproduces the same values.
"""

from __future__ import annotations

import json

import numpy as np


class Rng:
    """Seeded, counter-tracked random source (Philox4x64-10)."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.counter = 0  # number of draw calls issued, for bookkeeping
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        self.counter += 1
        return self._gen.uniform(low, high, size)

    def normal(self, mean=0.0, std=1.0, size=None) -> np.ndarray:
        self.counter += 1
        return self._gen.normal(mean, std, size)

    def truncated_normal(self, std: float, size) -> np.ndarray:
        """Normal draws re-sampled until within 2 std (ViT-style init)."""
        self.counter += 1
        out = self._gen.normal(0.0, std, size)
        bad = np.abs(out) > 2 * std
        while bad.any():
            out[bad] = self._gen.normal(0.0, std, bad.sum())
            bad = np.abs(out) > 2 * std
        return out

    def bernoulli(self, p: float, size=None) -> np.ndarray:
        self.counter += 1
        return (self._gen.uniform(0.0, 1.0, size) < p).astype(np.float64)

    def permutation(self, n: int) -> np.ndarray:
        self.counter += 1
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        self.counter += 1
        return self._gen.integers(low, high, size)

    def spawn(self, stream: int) -> "Rng":
        """Independent child stream (used for per-fold parallelism)."""
        return Rng(self.seed * 1_000_003 + stream + 1)

    # -- state (de)serialization, used by checkpoints --------------------

    def state_json(self) -> str:
        def plain(obj):
            if isinstance(obj, dict):
                return {k: plain(v) for k, v in obj.items()}
            if isinstance(obj, np.ndarray):
                return [int(v) for v in obj]
            if isinstance(obj, (np.integer, int)):
                return int(obj)
            return obj

        return json.dumps(
            {
                "seed": self.seed,
                "counter": self.counter,
                "philox": plain(self._gen.bit_generator.state),
            }
        )

    @classmethod
    def from_state_json(cls, payload: str) -> "Rng":
        blob = json.loads(payload)
        rng = cls(blob["seed"])
        rng.counter = blob["counter"]
        state = blob["philox"]
        inner = state["state"]
        inner["counter"] = np.array(inner["counter"], dtype=np.uint64)
        inner["key"] = np.array(inner["key"], dtype=np.uint64)
        state["buffer"] = np.array(state["buffer"], dtype=np.uint64)
        rng._gen.bit_generator.state = state
        return rng
