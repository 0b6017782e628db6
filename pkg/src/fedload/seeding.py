"""Hierarchical seed derivation.

Every random draw in the simulator comes from a generator seeded through
`derive_seed`, so results depend only on the master seed and the labels of
the component asking for randomness, never on execution order.
"""

import hashlib

import numpy as np


def derive_seed(master: int, *labels) -> int:
    """Derive a child seed from a master seed and a label path.

    The derivation hashes ``master/label1/label2/...`` with SHA-256 and keeps
    the low 63 bits, so it is stable across platforms and Python versions.
    Labels may be strings or integers.
    """
    h = hashlib.sha256()
    h.update(str(int(master)).encode())
    for lab in labels:
        h.update(b"/")
        h.update(str(lab).encode())
    return int.from_bytes(h.digest()[:8], "little") & (2**63 - 1)


def rng_for(master: int, *labels) -> np.random.Generator:
    """A fresh PCG64 generator for the given label path."""
    return np.random.default_rng(derive_seed(master, *labels))
