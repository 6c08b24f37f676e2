"""Seed handling shared by every stochastic stage."""
from __future__ import annotations

import numpy as np


def seed_sequence(seed):
    """A fresh :class:`numpy.random.SeedSequence` for ``seed``.

    ``SeedSequence.spawn`` advances an internal counter, so a sequence passed
    in by the caller is copied first: spawning from the same seed object twice
    then yields the same children.
    """
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key, pool_size=seed.pool_size)
    return np.random.SeedSequence(seed)
