"""Seeded, stream-named random number generation.

Every random draw in the package flows through an `Rng`, which couples a
64-bit seed with a hierarchical stream label ("pretrain/mask/epoch3/item5").
Identical (seed, stream) pairs produce identical draw sequences on every
platform: streams are hashed with BLAKE2 into a numpy SeedSequence, and the
underlying Philox generator is specified to be platform-stable.

Deriving a child stream never perturbs the parent, so independent work items
(dataset items, experiment arms) can draw concurrently without coordination.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _hash_label(label: str | int) -> int:
    if isinstance(label, int):
        return label & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """A deterministic random stream identified by (seed, stream label)."""

    def __init__(self, seed: int, stream: str = ""):
        self.seed = int(seed)
        self.stream = stream
        self._gen: np.random.Generator | None = None

    def child(self, *labels: str | int) -> "Rng":
        """Derive an independent sub-stream; the parent is not advanced."""
        joined = "/".join(str(l) for l in labels)
        stream = f"{self.stream}/{joined}" if self.stream else joined
        return Rng(self.seed, stream)

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            entropy = [self.seed & 0xFFFFFFFFFFFFFFFF]
            for part in self.stream.split("/"):
                if part:
                    entropy.append(_hash_label(part))
            self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
        return self._gen

    # Draw helpers. Each advances this stream's generator.

    def normal(self, shape: tuple[int, ...] | int, sigma: float = 1.0, dtype=np.float32) -> np.ndarray:
        return (self.generator.standard_normal(shape) * sigma).astype(dtype)

    def uniform(self, shape: tuple[int, ...] | int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self.generator.uniform(low, high, shape)

    def uniform_scalar(self, low: float = 0.0, high: float = 1.0) -> float:
        return float(self.generator.uniform(low, high))

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def integers(self, low: int, high: int, shape: tuple[int, ...] | int | None = None) -> np.ndarray:
        return self.generator.integers(low, high, size=shape)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream!r})"
