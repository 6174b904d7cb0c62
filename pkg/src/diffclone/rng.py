"""Named random streams derived from one root seed."""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("init", "shuffle", "noise", "env", "eval")


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(root_seed: int, name: str) -> np.random.Generator:
    """Independent generator for component ``name``; stable across runs and platforms."""
    return np.random.default_rng(np.random.SeedSequence(int(root_seed), spawn_key=(_key(name),)))


def derive_seed(root_seed: int, *path: int | str) -> int:
    """A 63-bit seed for the child identified by ``path`` (names or indices)."""
    keys = tuple(_key(p) if isinstance(p, str) else int(p) for p in path)
    state = np.random.SeedSequence(int(root_seed), spawn_key=keys).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))
