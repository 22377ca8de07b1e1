"""Reproducible random streams.

Every random draw in the package goes through an :class:`RngState`: a
``(seed, stream)`` pair that maps to an independent numpy ``Generator``.
Workers never share a generator; they derive child streams instead, so the
output of a parallel computation does not depend on how work is scheduled.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngState:
    seed: int
    stream: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed) & _MASK64)
        object.__setattr__(self, "stream", int(self.stream) & _MASK64)

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream,))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, index: int) -> "RngState":
        """Independent substream ``index`` of this stream."""
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream, int(index)))
        sub = int(ss.generate_state(1, dtype=np.uint64)[0])
        return RngState(self.seed, sub)


def as_generator(rng) -> np.random.Generator:
    """Accept an RngState, a Generator, or an int seed."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngState):
        return rng.generator()
    if rng is None:
        raise TypeError("an explicit RngState or Generator is required")
    return RngState(int(rng)).generator()
