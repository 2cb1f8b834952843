"""Seeded random streams.

Each :class:`Rng` is a PCG64 generator keyed by ``(seed, stream)`` through
numpy's ``SeedSequence``, so equal keys give equal draws on every platform
numpy supports. Named sub-streams hash the component name into a stream id.
"""

from __future__ import annotations

import hashlib

import numpy as np

ALGORITHM = "pcg64"


def stream_id(name: str) -> int:
    """Stable 63-bit stream id for a component name."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


class Rng:
    def __init__(self, seed: int, stream: int = 0):
        seed = int(seed)
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.algorithm = ALGORITHM
        self.seed = seed
        self.stream = int(stream)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(self.stream,))))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"

    def spawn(self, name: str | int) -> "Rng":
        """Independent child stream, derived from this stream and ``name``."""
        sub = name if isinstance(name, int) else stream_id(name)
        return Rng(self.seed, stream=stream_id(f"{self.stream}/{sub}"))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, size=None, loc=0.0, scale=1.0) -> np.ndarray:
        return self._gen.normal(loc, scale, size=size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True) -> np.ndarray:
        return self._gen.choice(a, size=size, replace=replace)


def per_item_normals(seed: int, stream: str, indices, shape) -> np.ndarray:
    """Standard normals of ``shape`` for each index, one stream per index.

    Results for an item depend only on ``(seed, stream, index)``, never on
    how a batch is partitioned.
    """
    base = stream_id(stream)
    out = np.empty((len(indices),) + tuple(shape))
    for k, idx in enumerate(indices):
        out[k] = Rng(seed, stream=stream_id(f"{base}/{int(idx)}")).normal(size=shape)
    return out
