"""Labeled sub-seed derivation.

Every random draw in a run takes its seed from derive_seed(master, labels...),
so adding or removing a consumer never shifts the seeds of the others.
"""

import hashlib

import numpy as np


def derive_seed(master: int, *labels) -> int:
    """First 8 bytes of BLAKE2b over the master seed and labels, as an int."""
    digest = hashlib.blake2b(digest_size=8)
    digest.update(str(int(master)).encode('utf-8'))
    for label in labels:
        digest.update(b'\x1f')
        digest.update(str(label).encode('utf-8'))
    return int.from_bytes(digest.digest(), 'little')


def rng_for(master: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *labels))
