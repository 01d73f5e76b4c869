"""Deterministic RNG stream derivation.

Every stochastic component draws from its own generator, derived from the
experiment seed plus a small integer path.  Streams never depend on wall
clock, thread count, or execution order, so runs are reproducible bit for
bit regardless of how work is scheduled.
"""

from __future__ import annotations

import numpy as np

# Stream domains.  Keeping these distinct guarantees that e.g. client
# sampling never shares a stream with dataset generation.
DOMAIN_DATA = 0
DOMAIN_MODEL = 1
DOMAIN_SAMPLING = 2
DOMAIN_CLIENT = 3
DOMAIN_EVAL = 4


def substream(seed: int, *path: int) -> np.random.Generator:
    """Return a generator for ``(seed, *path)``, independent of all other paths."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.PCG64(ss))
