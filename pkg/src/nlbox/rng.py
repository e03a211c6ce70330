"""Counter-based deterministic random streams.

Every stream is a Philox4x64-10 generator (``numpy.random.Philox``) keyed by
the 128-bit value ``(stream << 64) | seed``.  Substreams share the key and
start at counter ``substream << 128``, so they never overlap in practice.
Given the same ``(seed, stream, substream)`` the draws are bit-identical on
every platform numpy supports.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

MASK64 = (1 << 64) - 1
SEED_ENV = "NLBOX_SEED"
DEFAULT_SEED = 20080101


def resolve_seed(seed: int | None = None) -> int:
    """Explicit seed, else ``$NLBOX_SEED``, else a fixed default."""
    if seed is not None:
        return int(seed) & MASK64
    env = os.environ.get(SEED_ENV)
    if env:
        return int(env, 0) & MASK64
    return DEFAULT_SEED


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream: int = 0
    substream: int = 0

    def __post_init__(self) -> None:
        for name in ("seed", "stream"):
            value = getattr(self, name)
            if not 0 <= value <= MASK64:
                raise ValueError(f"{name} must fit in 64 bits, got {value}")
        if self.substream < 0:
            raise ValueError("substream must be non-negative")

    def generator(self) -> np.random.Generator:
        key = (self.stream << 64) | self.seed
        return np.random.Generator(np.random.Philox(key=key, counter=self.substream << 128))

    def child(self, substream: int) -> "RngStream":
        return RngStream(self.seed, self.stream, substream)

    def trial(self, index: int) -> "RngStream":
        return RngStream(self.seed, index)
