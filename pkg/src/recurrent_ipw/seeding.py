"""Deterministic random number streams.

Every stochastic step draws from a generator keyed by the user seed plus an
integer path (replicate number, bootstrap index, ...). Streams are
independent and do not depend on execution order, so parallel and serial
runs produce identical results.
"""

from __future__ import annotations

import numpy as np


def seed_seq(seed: int, *key: int) -> np.random.SeedSequence:
    """SeedSequence for the stream addressed by (seed, *key)."""
    return np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))


def rng_for(seed: int, *key: int) -> np.random.Generator:
    """Generator for the stream addressed by (seed, *key)."""
    return np.random.default_rng(seed_seq(seed, *key))
