"""Seed splitting for reproducible, independently re-runnable stages.

A master seed plus a path of keys (stage names, indices) maps to an
independent ``numpy.random.Generator``. String keys are folded to 32-bit
integers with CRC-32 so the mapping is stable across processes and Python
versions (``hash()`` is salted and cannot be used).
"""

from __future__ import annotations

import zlib

import numpy as np

SeedKey = int | str


def _fold(key: SeedKey) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise ValueError(f"seed keys must be non-negative, got {key}")
    return int(key)


def seed_sequence(master: int, *keys: SeedKey) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(master), spawn_key=tuple(_fold(k) for k in keys))


def derive_seed(master: int, *keys: SeedKey) -> int:
    """Return a 64-bit sub-seed for ``keys`` under ``master``."""
    return int(seed_sequence(master, *keys).generate_state(1, dtype=np.uint64)[0])


def make_rng(master: int, *keys: SeedKey) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(master, *keys)))
