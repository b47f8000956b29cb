"""Named random sub-streams derived from a single root seed.

Every consumer asks for ``substream(seed, "selection", t)`` style generators,
so re-seeding one component never shifts the draws seen by another.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part: object) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def substream(seed: int, *names: object) -> np.random.Generator:
    """Independent generator for the path ``names`` under root ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))
    return np.random.default_rng(ss)


def child_seed(rng: np.random.Generator) -> int:
    """Draw a 63-bit integer seed from ``rng`` (for handing to pure functions)."""
    return int(rng.integers(0, 2**63 - 1))
