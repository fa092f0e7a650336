"""
Counter-based RNG streams.

Every random consumer gets its own ``numpy.random.Generator`` derived from
the root seed and a tuple of integer keys. Stream ``(seed, k1, k2)`` is the
same whether it is created first, last or on another thread, so parallel
and sequential runs draw identical numbers.
"""

import hashlib
from typing import Union

import numpy as np

Key = Union[int, str]


def _key_to_int(key: Key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"stream keys must be non-negative, got {key}")
        return int(key)
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def seed_sequence(seed: int, *keys: Key) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_key_to_int(k) for k in keys))


def derive_rng(seed: int, *keys: Key) -> np.random.Generator:
    """Generator for stream ``keys`` under root ``seed``. String keys are hashed."""
    return np.random.default_rng(seed_sequence(seed, *keys))


def derive_seed(seed: int, *keys: Key) -> int:
    """A 32-bit integer seed for stream ``keys``, for APIs that want a plain int."""
    return int(seed_sequence(seed, *keys).generate_state(1, dtype=np.uint32)[0])
