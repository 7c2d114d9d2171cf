"""Named random substreams derived from a single user-facing seed.

Every source of randomness in a run (parameter init, data sampling, batch
shuffling, benchmark inputs, ...) pulls an independent generator via
``substream(seed, name)``, so runs are reproducible component by
component and adding a new consumer never perturbs the existing ones.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Generator for the ``name`` substream of ``seed``; stable across runs."""
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(tag,)))
