"""Deterministic random substreams.

Every stochastic step draws from a generator keyed by ``(seed, *key)`` so that
results do not depend on evaluation order or on how work is split across
workers.
"""

import numpy as np


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for the stream ``key`` under master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key)))


def derive_seed(seed: int, *key: int) -> int:
    """A 63-bit integer seed for the stream ``key``; handy for nested components."""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return int(seq.generate_state(2, dtype=np.uint32).astype(np.uint64) @ np.array([1 << 32, 1], dtype=np.uint64)) >> 1


def as_seed(rng) -> int:
    """Accept an int seed or a Generator and return an int master seed."""
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(0, 2**63 - 1))
    return int(rng)
