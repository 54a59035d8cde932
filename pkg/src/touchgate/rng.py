"""Deterministic random streams.

Every stochastic draw in the package flows through Rng, which is a PCG64
uniform source plus fixed transforms (Box-Muller for normals, floor for
integers). Identical seeds therefore give bitwise-identical streams on any
platform with IEEE-754 doubles, independent of numpy's own distribution
implementations changing between releases.
"""

from __future__ import annotations

import math

import numpy as np


class Rng:
    """Seeded random stream with a stable child-spawning scheme."""

    def __init__(self, seed, _ss: np.random.SeedSequence | None = None):
        self.seed_sequence = _ss if _ss is not None else np.random.SeedSequence(seed)
        self._bits = np.random.Generator(np.random.PCG64(self.seed_sequence))
        self._spawned = 0

    def child(self, tag: int) -> "Rng":
        """Independent substream; (seed, tag) fully determines it."""
        ss = np.random.SeedSequence(
            entropy=self.seed_sequence.entropy,
            spawn_key=tuple(self.seed_sequence.spawn_key) + (int(tag),),
        )
        return Rng(None, _ss=ss)

    # ---- draws ----------------------------------------------------------------

    def uniform(self, shape=()) -> np.ndarray:
        """U[0,1) doubles."""
        return self._bits.random(size=shape, dtype=np.float64)

    def standard_normal(self, shape=()) -> np.ndarray:
        """N(0,1) via Box-Muller on consecutive uniform pairs.

        A deterministic transform of the uniform stream, chosen over ziggurat
        so the draw sequence is reproducible from the documented algorithm.
        """
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u1 = np.clip(self.uniform((m,)), np.finfo(np.float64).tiny, None)
        u2 = self.uniform((m,))
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape) if shape else z[0]

    def normal(self, mean: float, std: float, shape=()) -> np.ndarray:
        return mean + std * self.standard_normal(shape)

    def uniform_int(self, lo: int, hi: int, shape=()) -> np.ndarray:
        """Integers in the half-open range {lo, ..., hi-1}, floor(u * span) + lo."""
        if lo >= hi:
            raise ValueError(f"uniform_int: empty range [{lo}, {hi})")
        span = hi - lo
        u = self.uniform(shape)
        return (np.floor(u * span).astype(np.int64) + lo).clip(lo, hi - 1)

    def choice(self, n: int) -> int:
        return int(self.uniform_int(0, n))

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates driven by the uniform stream."""
        idx = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = int(self.uniform_int(0, i + 1))
            idx[i], idx[j] = idx[j], idx[i]
        return idx


def sample(rng: Rng, dist: str, shape=(), **kwargs) -> np.ndarray:
    """Dispatcher over the named distributions used by data and loss sampling."""
    if dist == "uniform01":
        return rng.uniform(shape)
    if dist == "standard_normal":
        return rng.standard_normal(shape)
    if dist == "uniform_int":
        return rng.uniform_int(kwargs["lo"], kwargs["hi"], shape)
    raise ValueError(f"unknown distribution {dist!r}")
