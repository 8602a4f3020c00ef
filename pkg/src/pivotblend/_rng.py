"""Random number plumbing.

All randomness goes through numpy's Philox counter-based bit generator so that
seeded results are reproducible across platforms. Child streams are derived
with ``SeedSequence.spawn``: replication ``k`` of a run with master seed ``s``
uses ``SeedSequence(s).spawn(K)[k]``.
"""
from __future__ import annotations

import numpy as np


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def spawn_seeds(seed: int, count: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(count)
