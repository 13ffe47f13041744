"""Deterministic, construction-order-independent parameter initialization."""

from __future__ import annotations

import hashlib

import numpy as np

WEIGHT_STD = 0.02


def name_seed(name: str, seed: int) -> int:
    digest = hashlib.blake2b(f"{seed}:{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def rng_for(name: str, seed: int) -> np.random.Generator:
    return np.random.default_rng(name_seed(name, seed))


def truncated_normal(name: str, shape, seed: int, std: float = WEIGHT_STD, dtype=np.float32) -> np.ndarray:
    """N(0, std) truncated to +-2 std, drawn from a generator keyed on (seed, name)."""
    rng = rng_for(name, seed)
    shape = tuple(shape)
    n = int(np.prod(shape))
    out = np.empty(0)
    while out.size < n:
        draw = rng.standard_normal(max(n, 16) * 2)
        out = np.concatenate([out, draw[np.abs(draw) <= 2.0]])
    return (out[:n] * std).reshape(shape).astype(dtype)
