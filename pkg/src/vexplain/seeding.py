"""Named, reproducible random substreams derived from one run seed.

Every component (data generation, weight init, sampling, shuffling) pulls
its own generator via ``substream(seed, name)`` so streams stay independent
of each other while the whole run remains a pure function of the seed.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, name: str) -> np.random.Generator:
    """Generator for the substream ``name`` of run ``seed``; stable across runs."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), _name_key(name)]))
