"""Seeded random streams.

Every stochastic operation takes an integer seed and draws from a PCG64
generator. Independent sub-streams are derived by spawning keys, so two
components that share a user seed never share random numbers.
"""
from __future__ import annotations

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def make_rng(seed: int, *stream: int | str) -> np.random.Generator:
    """PCG64 generator for ``seed`` restricted to the named sub-stream."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for s in stream:
        key.append(stream_key(s) if isinstance(s, str) else int(s))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def derive_seed(seed: int, *stream: int | str) -> int:
    """A 63-bit integer seed for a child component."""
    return int(make_rng(seed, *stream).integers(0, 2**63 - 1))
