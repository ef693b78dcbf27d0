"""Seed derivation.

Every random stream in the package is a numpy ``Generator`` over PCG64,
seeded through ``SeedSequence`` with integer entropy. Module seeds are derived
from the single master seed by hashing ``(master_seed, stage_name)`` with
SHA-256, so adding a new stage never perturbs the streams of existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master_seed: int, *stage: object) -> int:
    """Stable 63-bit seed for a named stage under ``master_seed``."""
    key = ":".join([str(int(master_seed))] + [str(s) for s in stage])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def rng_for(master_seed: int, *stage: object) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(derive_seed(master_seed, *stage))))
