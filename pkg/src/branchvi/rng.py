"""Reproducible, splittable random streams.

A stream is identified by ``(seed, stream)`` plus a split path. Identical
identifiers give identical draw sequences in every process and under any
degree of parallelism, because the underlying bit generator is the
counter-based Philox keyed through a ``SeedSequence`` spawn key (spawn keys
are collision-free by construction, unlike ad-hoc integer mixing).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream: int = 0
    path: tuple = ()

    def child(self, index: int) -> "RngStream":
        """Derived stream; distinct indices never collide."""
        return RngStream(self.seed, self.stream, self.path + (int(index),))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed,
                                    spawn_key=(self.stream, *self.path))
        return np.random.Generator(np.random.Philox(ss))

    def normal(self, shape=()) -> np.ndarray:
        """Standard-normal draw; consumes this stream from its origin."""
        return self.generator().standard_normal(shape)
