"""Named, independent random streams derived from one root seed."""

from __future__ import annotations

import zlib

import numpy as np


def stream_seed(root: int, name: str) -> np.random.SeedSequence:
    """Seed sequence for stream ``name``; the same (root, name) always maps to the same stream."""
    return np.random.SeedSequence([int(root) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))])


def rng_for(root: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(root, name))
