"""Deterministic, name-keyed random number generation.

All stochastic choices in the pipeline flow through counter-based Philox
generators keyed by hashing a (seed, name, ...) tuple.  Two properties
matter: identical keys give identical streams on any platform, and adding
a new named draw never perturbs existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_key(*parts) -> int:
    """Hash an arbitrary tuple of ints/strings into a 128-bit Philox key."""
    h = hashlib.sha256()
    for p in parts:
        h.update(str(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:16], "little")


def derive_seed(*parts) -> int:
    """Like derive_key but folded to 63 bits, for storing in plain int fields."""
    return derive_key(*parts) & (2**63 - 1)


def make_rng(*parts) -> np.random.Generator:
    """Generator seeded only by the named parts; streams are independent per key."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(derive_key(*parts))))
