"""Seeded random streams.

Every generator is numpy's Philox (a counter-based PRNG) keyed by
``(seed, stream)``.  Sub-streams are selected through the high counter word,
so two sub-streams never overlap in practice and any of them can be
recreated from three integers.

Stream indices used across the package: 0 = parameter init, 1 = task
sampling during training, 2 = evaluation tasks, 3 = world construction.
"""

from __future__ import annotations

import numpy as np

INIT, TRAIN, EVAL, WORLD = 0, 1, 2, 3


def stream(seed: int, index: int, sub: int = 0) -> np.random.Generator:
    if seed < 0 or index < 0 or sub < 0:
        raise ValueError("seed, stream index and sub-stream must be non-negative")
    key = np.array([seed, index], dtype=np.uint64)
    counter = np.array([0, 0, 0, sub], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))
