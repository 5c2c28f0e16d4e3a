"""Counter-based seed derivation.

Every random stream in the package is derived from a base seed plus a tuple
of keys (sample index, a label, ...).  The derivation is

    seed = little-endian uint64 of BLAKE2b-8("taps|" + "|".join(str(k) for k in keys))

and the stream itself is numpy's PCG64 seeded with that integer.  Because a
sample's stream depends only on (base_seed, index) and never on how many
samples ran before it in the same process, results do not depend on the
worker count.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np


def derive_seed(*keys: object) -> int:
    text = "taps|" + "|".join(str(k) for k in keys)
    digest = hashlib.blake2b(text.encode(), digest_size=8).digest()
    return struct.unpack("<Q", digest)[0]


def make_rng(*keys: object) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(*keys)))


def unit_hash(*keys: object) -> float:
    """Deterministic uniform in [0, 1) for the given keys (53-bit resolution)."""
    return (derive_seed(*keys) >> 11) * (1.0 / (1 << 53))


def weighted_index(rng: np.random.Generator, weights) -> int:
    """Draw an index with probability proportional to ``weights``."""
    cum = np.cumsum(np.asarray(weights, dtype=float))
    total = cum[-1]
    if not total > 0:
        raise ValueError("weights must have a positive sum")
    i = int(np.searchsorted(cum, rng.random() * total, side="right"))
    return min(i, len(cum) - 1)
