"""Deterministic random streams.

Every random decision in the pipeline draws from a named substream of one
root seed, so stages (splitting, weight init, sampling noise) are
independently reproducible.
"""

import hashlib

import numpy as np


def substream(root_seed: int, *names) -> np.random.Generator:
    """Generator for the substream identified by ``names`` under ``root_seed``.

    The mapping is stable across platforms and Python versions (sha256 of the
    joined names, fed into a SeedSequence together with the root seed).
    """
    key = "/".join(str(n) for n in names)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([int(root_seed)] + words))
