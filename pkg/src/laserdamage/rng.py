"""Labeled sub-seeding.

Every random stream in a run is derived from one top-level seed plus a tuple
of string labels, so adding a new consumer never shifts the draws seen by an
existing one.
"""
from __future__ import annotations

import zlib

import numpy as np

MAX_SEED = 2**64 - 1


def _label_key(label: str | int) -> int:
    if isinstance(label, int):
        return label
    return zlib.crc32(label.encode("utf-8"))


def derive_rng(seed: int, *labels: str | int) -> np.random.Generator:
    """Return a generator keyed on ``seed`` and the label path."""
    if not 0 <= int(seed) <= MAX_SEED:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_label_key(x) for x in labels))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, *labels: str | int) -> int:
    """Derive a child seed (u64) from ``seed`` and the label path."""
    if not 0 <= int(seed) <= MAX_SEED:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_label_key(x) for x in labels))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
