"""Counter-style derivation of independent random streams from one master seed.

Every random draw in the package flows through a generator obtained from
``derive_rng(master_seed, domain, *counters)``.  Streams are identified by
their integer path, never by call order, so reruns of the same configuration
are bit-identical and independent work items (repetitions, rounds, links)
can be evaluated in any order or in parallel.
"""
from __future__ import annotations

import numpy as np

# Domain tags keep unrelated subsystems on disjoint streams even when the
# remaining counters collide.
DOMAIN_INIT = 0
DOMAIN_DATA = 1
DOMAIN_MASK = 2
DOMAIN_NOISE = 3
DOMAIN_FADING = 4
DOMAIN_SAMPLER = 5
DOMAIN_REP = 6

__all__ = [
    "DOMAIN_INIT",
    "DOMAIN_DATA",
    "DOMAIN_MASK",
    "DOMAIN_NOISE",
    "DOMAIN_FADING",
    "DOMAIN_SAMPLER",
    "DOMAIN_REP",
    "derive_rng",
    "derive_seed",
]


def derive_rng(seed: int, *path: int) -> np.random.Generator:
    """Return a generator for the stream addressed by ``(seed, *path)``."""
    if seed < 0:
        raise ValueError("master seed must be non-negative")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.default_rng(ss)


def derive_seed(seed: int, *path: int) -> int:
    """Collapse a stream address into a single integer seed."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
