"""Named random streams derived from one run seed.

Every (round, purpose, zone) triple gets its own generator, so results do
not depend on the order in which zones are processed.
"""

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)) and part >= 0:
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def rng_for(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([_key(seed)] + [_key(k) for k in keys]))
