"""Seed derivation shared by every randomized component.

All randomness flows from a master seed plus a tuple of integer keys, so a
result never depends on how work was split across workers.
"""
import zlib

import numpy as np


def _key(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def derive_seed(master: int, *keys) -> int:
    seq = np.random.SeedSequence(entropy=int(master), spawn_key=tuple(_key(k) for k in keys))
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def derive_rng(master: int, *keys) -> np.random.Generator:
    """A generator for the stream identified by ``(master, *keys)``."""
    seq = np.random.SeedSequence(entropy=int(master), spawn_key=tuple(_key(k) for k in keys))
    return np.random.default_rng(seq)
