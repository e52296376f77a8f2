"""Seeded random streams.

Every stochastic routine draws from a Philox counter-based generator.  A
trajectory with index ``k`` under master seed ``s`` uses the stream spawned
from ``SeedSequence(s, spawn_key=(k,))``, so results do not depend on how
trajectories are scheduled.
"""

from __future__ import annotations

import numpy as np

SEED_MASK = (1 << 64) - 1


def stream(seed: int, index: int = 0) -> np.random.Generator:
    """Generator for trajectory ``index`` under the 64-bit master ``seed``."""
    if seed is None:
        raise ValueError("a seed is required for stochastic computations")
    seed = int(seed)
    if not 0 <= seed <= SEED_MASK:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    ss = np.random.SeedSequence(seed, spawn_key=(int(index),))
    return np.random.Generator(np.random.Philox(ss))


def as_generator(rng, index: int = 0) -> np.random.Generator:
    """Accept a Generator, an integer seed or None (seed 0)."""
    if isinstance(rng, np.random.Generator):
        return rng
    return stream(0 if rng is None else rng, index)


class UniformBuffer:
    """Blocks of uniforms in (0, 1] handed to compiled kernels."""

    def __init__(self, rng: np.random.Generator, size: int = 1 << 18):
        self.rng = rng
        self.size = size

    def next_block(self) -> np.ndarray:
        # 1 - U lies in (0, 1], safe for -log(u)
        return 1.0 - self.rng.random(self.size)
