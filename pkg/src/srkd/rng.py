"""Deterministic seed derivation.

Every random draw in the pipeline flows through an explicit seed; sub-seeds
are derived by mixing a root seed with context labels (sample index, stage,
purpose string) so that worker ordering can never change outputs.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def _part_to_int(part) -> int:
    if isinstance(part, int):
        return part & _MASK64
    if isinstance(part, str):
        digest = hashlib.sha256(part.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    raise TypeError(f"seed part must be int or str, got {type(part).__name__}")


def mix_seed(seed: int, *parts) -> int:
    """Mix a root seed with context parts into a new 64-bit seed."""
    state = _splitmix64(seed & _MASK64)
    for part in parts:
        state = _splitmix64(state ^ _part_to_int(part))
    return state


def np_rng(seed: int, *parts) -> np.random.Generator:
    return np.random.default_rng(mix_seed(seed, *parts))


def torch_gen(seed: int, *parts):
    import torch

    gen = torch.Generator()
    gen.manual_seed(mix_seed(seed, *parts) & ((1 << 63) - 1))
    return gen
