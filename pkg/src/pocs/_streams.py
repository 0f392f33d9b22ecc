"""Deterministic random streams on a counter-based generator.

Every random draw in this package comes from Philox, a counter-based
bit generator whose output is a pure function of (key, counter). Stream
keys are derived by hashing a user seed together with a domain tag and
two indices through ``numpy.random.SeedSequence``, so results never
depend on draw order or on how work is scheduled across workers:

    stream(seed, domain, index, step)
        -> Generator(Philox(SeedSequence(seed, spawn_key=(domain, index, step))))
"""

from __future__ import annotations

import numpy as np

# Domain tags keep independent subsystems off each other's streams.
DOMAIN_PERTURBATION = 0
DOMAIN_SYNTHESIS = 1
DOMAIN_COMPLETION = 2

_U64 = 1 << 64


def as_u64(value: int) -> int:
    """Map a (possibly negative) 64-bit integer onto the unsigned range."""
    return int(value) % _U64


def stream(seed: int, domain: int, index: int, step: int) -> np.random.Generator:
    """Return the generator for (seed, domain, index, step).

    The same arguments always yield the same stream, independent of any
    other stream drawn before or after.
    """
    key = np.random.SeedSequence(
        entropy=as_u64(seed), spawn_key=(int(domain), as_u64(index), as_u64(step))
    )
    return np.random.Generator(np.random.Philox(key))
