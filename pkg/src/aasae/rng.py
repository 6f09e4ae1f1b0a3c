"""Explicit, reproducible random streams.

Every stochastic operation in the package takes an ``RngState`` (or a numpy
``Generator`` built from one). Streams are derived by hashing integer keys
through ``numpy.random.SeedSequence`` so that, e.g., the stream used for
example 17 in epoch 3 is the same no matter which minibatch it lands in.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngState:
    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence([self.seed & _MASK64, self.stream_id & _MASK64])
        return np.random.Generator(np.random.PCG64(ss))

    def derive(self, *keys: int) -> "RngState":
        """Child stream keyed by ``keys`` (e.g. worker index, epoch, example index)."""
        ss = np.random.SeedSequence([self.seed & _MASK64, self.stream_id & _MASK64, *(k & _MASK64 for k in keys)])
        return RngState(self.seed, int(ss.generate_state(1, np.uint64)[0]))


RngLike = Union[RngState, np.random.Generator]


def as_generator(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngState):
        return rng.generator()
    raise TypeError(f"expected RngState or numpy Generator, got {type(rng).__name__}")


def example_streams(rng: RngState, n: int) -> list[RngState]:
    return [rng.derive(i) for i in range(n)]
