"""Deterministic RNG derivation.

All randomness in the package flows from numpy's Philox4x64 counter-based
generator. Sub-streams are derived by hashing a tuple of string/int parts
into a 128-bit Philox key, so any (purpose, seed, index, round) combination
gets an independent, platform-stable stream.
"""

import hashlib

import numpy as np


def derive_key(*parts) -> int:
    """Hash arbitrary parts into a 128-bit integer Philox key."""
    text = ":".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


def make_rng(*parts) -> np.random.Generator:
    """Philox generator keyed by the hashed parts."""
    return np.random.Generator(np.random.Philox(key=derive_key(*parts)))
