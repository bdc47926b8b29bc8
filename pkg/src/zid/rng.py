"""Deterministic splittable random streams.

Every stochastic consumer derives its own stream by splitting from a root
seed, so draws never depend on call order across modules.  Streams are
backed by the Philox 64-bit counter-based bit generator; a split is keyed
by a path of integers/strings hashed into a SeedSequence spawn key.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["Rng"]


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    if isinstance(key, str):
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    raise TypeError(f"rng split keys must be int or str, got {type(key).__name__}")


class Rng:
    """A named stream of a splittable counter-based generator.

    ``split(*keys)`` derives an independent child stream; identical
    (seed, path) always reproduce identical draws regardless of what any
    other stream has consumed.
    """

    def __init__(self, seed: int, _path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(_path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def split(self, *keys) -> "Rng":
        return Rng(self.seed, self.path + tuple(_key_to_int(k) for k in keys))

    def normal(self, shape=(), dtype=np.float64) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=np.float64).astype(dtype, copy=False)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform integers in [low, high) — high exclusive, numpy convention."""
        return self._gen.integers(low, high, size=shape)

    def choice(self, n: int, size, replace: bool = True) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def shuffle(self, x) -> None:
        self._gen.shuffle(x)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"
