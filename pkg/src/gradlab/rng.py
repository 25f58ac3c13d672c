"""Seeded randomness.

One PRNG algorithm is fixed for the whole repo: NumPy's PCG64. Independent
streams are derived by seed-splitting through ``SeedSequence`` spawn keys,
so e.g. network init, environment dynamics, and minibatch shuffling never
share a stream, and adding a new consumer never shifts existing ones.
"""

from __future__ import annotations

import numpy as np

__all__ = ["make_rng", "child_seed", "child_rng"]


def make_rng(seed: int) -> np.random.Generator:
    """Fresh PCG64 generator. Identical seed gives an identical sequence."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def child_seed(base_seed: int, *path: int) -> np.random.SeedSequence:
    """Derive an independent seed stream from a base seed and an integer path.

    Used wherever the code needs hash(base_seed, index)-style run seeds:
    distinct paths give statistically independent streams.
    """
    return np.random.SeedSequence(entropy=base_seed, spawn_key=tuple(path))


def child_rng(base_seed: int, *path: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(child_seed(base_seed, *path)))
