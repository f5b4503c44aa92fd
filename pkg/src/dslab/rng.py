"""Seeded random streams keyed by (seed, name).

Each stream depends only on the run seed and a string key such as a
parameter name, so draws for one parameter never depend on how many
other parameters were initialized before it.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, name: str) -> int:
    digest = hashlib.blake2b(f"{int(seed)}\x1f{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(stream_key(seed, name)))


def box_muller(gen: np.random.Generator, count: int) -> np.ndarray:
    """``count`` standard normal deviates from pairs of uniforms."""
    pairs = (count + 1) // 2
    u1 = 1.0 - gen.random(pairs)  # (0, 1], keeps log finite
    u2 = gen.random(pairs)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(2 * pairs)
    z[0::2] = r * np.cos(2.0 * np.pi * u2)
    z[1::2] = r * np.sin(2.0 * np.pi * u2)
    return z[:count]


def normal(seed: int, name: str, shape: tuple[int, ...], std: float) -> np.ndarray:
    count = int(np.prod(shape)) if shape else 1
    return (std * box_muller(stream(seed, name), count)).reshape(shape)
