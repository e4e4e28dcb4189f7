"""Counter-based seed splitting: one 64-bit root seed feeds every purpose."""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["derive_seed", "generator"]


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode())


def derive_seed(root: int, *path) -> int:
    """Deterministic child seed for ``root`` along a purpose path such as
    ``("colloc",)`` or ``("sim", row_index)``."""
    ss = np.random.SeedSequence(int(root), spawn_key=tuple(_key(p) for p in path))
    return int(ss.generate_state(2, dtype=np.uint32).astype(np.uint64) @ np.array([1, 2**32], dtype=np.uint64))


def generator(root: int, *path) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *path))
