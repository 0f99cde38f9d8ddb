"""Named, reproducible random sub-streams derived from one root seed."""

from __future__ import annotations

import hashlib

import numpy as np


def _words(name: str) -> list[int]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def stream(seed: int, *names) -> np.random.Generator:
    """A generator keyed by ``seed`` and a path of names, e.g. ``stream(7, "gan", "case")``."""
    entropy = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    for n in names:
        entropy.extend(_words(str(n)))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def child_seed(seed: int, *names) -> int:
    """A 63-bit integer seed for a named component."""
    return int(stream(seed, "seed", *names).integers(0, 2**63 - 1))
