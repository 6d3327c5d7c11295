"""Deterministic seed derivation."""

import numpy as np


def derive_seed(seed: int, *keys: int) -> int:
    """
    Derive an independent 32-bit seed from a base seed and integer keys.

    The same (seed, keys) always yields the same value, so work split across
    threads draws identical random numbers regardless of scheduling.
    """
    sequence = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *[int(k) for k in keys]])
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Generator seeded with derive_seed(seed, *keys)."""
    return np.random.default_rng(derive_seed(seed, *keys))
