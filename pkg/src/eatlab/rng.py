"""Deterministic RNG stream derivation.

Every stochastic component in the lab draws from a Generator derived from
(master seed, integer tags). Identical (seed, tags) always yields the same
stream, which is what makes reruns byte-identical.
"""

import numpy as np


def derive_rng(master_seed: int, *tags: int) -> np.random.Generator:
    """Return an independent PCG64 stream for (master_seed, *tags)."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), *map(int, tags)]))


def derive_seed(master_seed: int, *tags: int) -> int:
    """Collapse (master_seed, *tags) into a single 63-bit seed."""
    ss = np.random.SeedSequence([int(master_seed), *map(int, tags)])
    return int(ss.generate_state(1, np.uint64)[0] >> 1)
