"""Counter-based random streams keyed by (seed, purpose, index).

Every consumer asks for its own stream, so the values drawn never depend on
the order in which other parts of the program consumed randomness.
"""
import zlib

import numpy as np


def _label_key(label):
    return zlib.crc32(str(label).encode("utf-8"))


def stream(seed, label, *index):
    """Return a Philox-backed ``np.random.Generator`` for one purpose."""
    words = [int(seed) & 0xFFFFFFFF, _label_key(label)]
    words.extend(int(i) & 0xFFFFFFFF for i in index)
    ss = np.random.SeedSequence(words)
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed, label, *index):
    """A 32-bit integer seed derived from the same key space."""
    return int(stream(seed, label, *index).integers(0, 2**31 - 1))
