"""Seed hierarchy: one master seed fans out into independent per-stage seeds.

Sub-seeds come from splitmix64 applied to ``master ^ fnv1a64(stage name)``,
so every stage (partitioning, each teacher, aggregation noise, ...) can be
reproduced on its own. Random streams are numpy ``PCG64`` generators;
Gaussian draws use numpy's ziggurat ``standard_normal``.
"""

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


def derive_seed(master: int, *path) -> int:
    """Seed for the stage named by ``path``, e.g. ``derive_seed(s, "teacher", 3)``."""
    s = int(master) & MASK64
    for part in path:
        s = splitmix64(s ^ _fnv1a64(str(part)))
    return s


def rng_for(master: int, *path) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master, *path)))
