"""Deterministic random streams, forked per purpose.

Every stochastic component draws from its own labeled stream so that adding or
removing one consumer (say, a second adapter) cannot shift the draws seen by
another. The label is hashed into the seed sequence.
"""

from __future__ import annotations

import zlib

import numpy as np


def labeled_rng(seed: int, label: str) -> np.random.Generator:
    """An independent generator for (seed, label)."""
    return np.random.default_rng([seed, zlib.crc32(label.encode("utf-8"))])
