"""Seeded counter-based random streams.

Every random draw in the project comes from a ``numpy.random.Generator`` on a
Philox bit generator. Child streams are derived by key, so adding a new consumer
never shifts the draws of an existing one.
"""
import hashlib

import numpy as np

from src.utils.errors import InputError


def make_rng(seed: int) -> np.random.Generator:
    if seed < 0:
        raise InputError(f"seed must be non-negative, got {seed}")
    return np.random.Generator(np.random.Philox(int(seed)))


def child_rng(seed: int, stream: str) -> np.random.Generator:
    """Independent stream named ``stream`` under ``seed``."""
    digest = hashlib.sha256(f"{int(seed)}:{stream}".encode("utf-8")).digest()
    return np.random.Generator(np.random.Philox(int.from_bytes(digest[:8], "little")))
