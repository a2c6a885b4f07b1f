"""Seeded random streams.

Every stochastic routine takes a :class:`numpy.random.Generator`. Streams
are built on the counter-based Philox bit generator and split with
:class:`numpy.random.SeedSequence`, so child ``k`` of master seed ``s`` is
the same stream no matter which worker consumes it or in what order.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed) -> np.random.Generator:
    """Philox generator for an int seed or an existing SeedSequence."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def spawn(seed, n: int) -> list[np.random.SeedSequence]:
    """Independent child sequences ``0..n-1`` of ``seed``."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return ss.spawn(n)


def child_seed(seed, *path: int) -> np.random.SeedSequence:
    """Deterministic child addressed by a path, e.g. ``(replication, role)``.

    A SeedSequence parent is extended, so ``child_seed(child_seed(s, a), b)``
    equals ``child_seed(s, a, b)``.
    """
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + tuple(path))
    return np.random.SeedSequence(seed, spawn_key=tuple(path))


def as_rng(rng_or_seed) -> np.random.Generator:
    if isinstance(rng_or_seed, np.random.Generator):
        return rng_or_seed
    return make_rng(rng_or_seed)
