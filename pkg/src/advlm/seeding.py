"""Seed derivation and random generator construction.

All randomness in the package flows through counter-based Philox streams
keyed by 64-bit integers, so every run is reproducible from its seed.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["make_rng", "derive_seed"]


def make_rng(seed: int) -> np.random.Generator:
    """A Generator over a Philox stream keyed directly by `seed`."""
    seed = int(seed)
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.Generator(np.random.Philox(key=seed))


def derive_seed(*parts) -> int:
    """Stable 64-bit child seed from arbitrary labelled parts.

    Uses blake2b over the string forms, so derivations are stable across
    processes and Python versions (unlike the built-in hash()).
    """
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(str(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")
