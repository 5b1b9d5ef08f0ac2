"""Counter-addressed random streams.

Every random draw in the package comes from ``stream(seed, *keys)``. A stream
is a pure function of its address, so work can be reordered or split across
workers without changing any realized value.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_to_int(key: int | str) -> int:
    if isinstance(key, (bool, np.bool_)):
        raise TypeError("boolean stream keys are ambiguous")
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("stream keys must be non-negative")
        return int(key)
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, *keys: int | str) -> np.random.Generator:
    """Return the generator addressed by ``(seed, *keys)``."""
    ss = np.random.SeedSequence(_key_to_int(seed), spawn_key=tuple(_key_to_int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *keys: int | str) -> int:
    """A 63-bit integer seed derived from an address (for handing to configs)."""
    ss = np.random.SeedSequence(_key_to_int(seed), spawn_key=tuple(_key_to_int(k) for k in keys))
    return int(ss.generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> np.uint64(1))
