"""Seed derivation: every random stream comes from a master seed plus integer keys."""

from __future__ import annotations

import numpy as np


def seed_sequence(*keys) -> np.random.SeedSequence:
    if len(keys) == 1 and isinstance(keys[0], np.random.SeedSequence):
        return keys[0]
    flat = []
    for k in keys:
        if isinstance(k, np.random.SeedSequence):
            flat.extend(int(e) for e in np.atleast_1d(k.entropy))
            flat.extend(int(s) for s in k.spawn_key)
        else:
            flat.append(int(k) & 0xFFFFFFFFFFFFFFFF)
    return np.random.SeedSequence(flat)


def rng(*keys) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(*keys))


def derive_int(*keys) -> int:
    """A 63-bit integer seed derived from ``keys``."""
    return int(seed_sequence(*keys).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
