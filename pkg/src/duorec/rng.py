"""Named, counter-based random streams.

Every source of randomness in the project (weight init, dropout masks,
batch shuffling, partner sampling) draws from an RngStream identified by
a (seed, label) pair. Streams are backed by the Philox counter-based
generator, so two streams with the same seed and label always produce the
same draws, and advancing one stream never disturbs another.
"""

from __future__ import annotations

import hashlib

import numpy as np


class RngStream:
    """A deterministic, independently addressable random stream.

    The Philox key is derived from (seed, label); the draw counter selects
    the block offset. Each request advances the counter by a block count
    large enough that successive requests never overlap.
    """

    def __init__(self, seed: int, label: str, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.label = label
        self.counter = int(counter)
        digest = hashlib.sha256(f"{self.seed}:{label}".encode("utf-8")).digest()
        self._key = np.frombuffer(digest[:16], dtype=np.uint64)

    def child(self, suffix: str) -> "RngStream":
        """A fresh stream labeled ``<label>.<suffix>`` with counter 0."""
        return RngStream(self.seed, f"{self.label}.{suffix}")

    def _generator(self) -> np.random.Generator:
        bitgen = np.random.Philox(key=self._key)
        bitgen.advance(self.counter)
        return np.random.Generator(bitgen)

    def uniform(self, n: int) -> np.ndarray:
        """n uniforms in [0, 1); one counter block covers four draws."""
        gen = self._generator()
        out = gen.random(n)
        self.counter += -(-n // 4)
        return out

    def normal(self, n: int, std: float = 1.0) -> np.ndarray:
        """n gaussians; extra counter headroom for ziggurat rejections."""
        gen = self._generator()
        out = gen.standard_normal(n) * std
        self.counter += n + 4
        return out

    def truncated_normal(self, n: int, std: float) -> np.ndarray:
        """Gaussian draws clipped to two standard deviations."""
        return np.clip(self.normal(n, std), -2.0 * std, 2.0 * std)

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        """n integers uniform on [low, high)."""
        u = self.uniform(n)
        return low + np.minimum((u * (high - low)).astype(np.int64), high - low - 1)

    def permutation(self, n: int) -> np.ndarray:
        """A permutation of range(n), derived from n uniform keys."""
        return np.argsort(self.uniform(n), kind="stable")

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, label={self.label!r}, counter={self.counter})"
