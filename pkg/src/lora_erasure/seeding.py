"""Named random streams split from one root seed.

Each stream is a Philox (counter-based) generator keyed by the root seed and
a path of labels, so a stream never depends on how many others were drawn
before it.
"""

import hashlib

import numpy as np


def _key(label) -> int:
    if isinstance(label, (int, np.integer)) and label >= 0:
        return int(label)
    digest = hashlib.sha256(repr(label).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def seed_sequence(root: int, *path) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(root), spawn_key=tuple(_key(p) for p in path))


def generator(root: int, *path) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed_sequence(root, *path)))


def derive_seed(root: int, *path) -> int:
    """A 63-bit integer seed for APIs that take plain ints."""
    return int(seed_sequence(root, *path).generate_state(2, np.uint32).view(np.uint64)[0] >> 1)
