"""Labeled random streams forked from one run seed.

Each component draws from ``stream(seed, "label")``; adding a new label never
shifts the numbers another label sees.
"""

import zlib

import numpy as np


def stream(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(label.encode())])
