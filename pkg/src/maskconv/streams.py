"""Named, independent random streams derived from one root seed."""

import zlib

import numpy as np


def stream(seed: int, name: str, index: int = 0) -> np.random.Generator:
    """Generator for (root seed, stream name, index); names hash with CRC-32."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode()), index]))
