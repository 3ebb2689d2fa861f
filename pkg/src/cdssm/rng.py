"""Deterministic random streams.

A stream is addressed by ``(seed, stream_id)`` plus an optional path of child
indices.  Children are derived through :class:`numpy.random.SeedSequence`
spawn keys, so the draws of a child depend only on its address, never on the
order in which workers consume them.
"""

from __future__ import annotations

import numpy as np


class RandomStream:
    __slots__ = ("seed", "stream_id", "path", "_gen")

    def __init__(self, seed: int, stream_id: int = 0, path: tuple[int, ...] = ()):
        if not (0 <= int(seed) < 2**64):
            raise ValueError("seed must fit in 64 unsigned bits")
        if stream_id < 0:
            raise ValueError("stream_id must be nonnegative")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id, *self.path))
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def __repr__(self) -> str:
        return f"RandomStream(seed={self.seed}, stream_id={self.stream_id}, path={self.path})"

    def child(self, index: int) -> "RandomStream":
        """Independent sub-stream; same index always gives the same draws."""
        return RandomStream(self.seed, self.stream_id, self.path + (int(index),))

    def split(self, n: int) -> list["RandomStream"]:
        return [self.child(i) for i in range(n)]

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def permutation(self, x):
        return self._gen.permutation(x)

    def bytes(self, n: int) -> bytes:
        return self._gen.bytes(n)


def as_stream(rng: RandomStream | int | None, stream_id: int = 0) -> RandomStream:
    if isinstance(rng, RandomStream):
        return rng
    return RandomStream(0 if rng is None else int(rng), stream_id)
