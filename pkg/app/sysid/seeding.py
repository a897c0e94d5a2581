"""Counter-based seed derivation for Monte Carlo runs.

Every stream is a pure function of its parent seed and a label, so adding or
removing an estimator never shifts another estimator's random numbers.
"""

import hashlib
from typing import Union

import numpy as np


def derive_seed(parent: int, label: Union[int, str]) -> int:
    """Hash a parent seed and a label into a 63-bit child seed.

    Args:
        parent: Parent seed (master seed or run seed)
        label: Run index or estimator tag

    Returns:
        Non-negative integer seed
    """
    payload = f"{int(parent)}:{label}".encode("utf-8")
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1


def make_rng(parent: int, label: Union[int, str]) -> np.random.Generator:
    """Create an independent generator for (parent, label)."""
    return np.random.default_rng(derive_seed(parent, label))
