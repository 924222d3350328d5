"""Seeded random streams.

PCG64 produces the same draw sequence for a given seed on every platform
numpy supports, which is what the experiment runners rely on.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    return zlib.crc32(str(key).encode("utf-8"))


class RngStream:
    algorithm = "PCG64"

    def __init__(self, seed: int, spawn_key: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        self.seed = int(seed)
        self.spawn_key = tuple(spawn_key)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
        self.gen = np.random.Generator(np.random.PCG64(seq))

    def child(self, *keys) -> "RngStream":
        """Independent stream derived from this seed and a tuple of labels."""
        return RngStream(self.seed, self.spawn_key + tuple(_key_to_int(k) for k in keys))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, key={self.spawn_key}, algorithm={self.algorithm})"

    # thin delegation; callers needing more use .gen directly
    def random(self, size=None):
        return self.gen.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, x):
        return self.gen.permutation(x)

    def choice(self, a, size=None, replace=True, p=None):
        return self.gen.choice(a, size=size, replace=replace, p=p)

    def truncated_normal(self, shape, std: float = 0.02, bound: float = 2.0, dtype=np.float32) -> np.ndarray:
        """Normal(0, std) samples redrawn until they fall inside ±bound·std."""
        out = self.gen.standard_normal(shape)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self.gen.standard_normal(int(bad.sum()))
            bad = np.abs(out) > bound
        return (out * std).astype(dtype)
