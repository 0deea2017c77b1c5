"""Counter-based random streams keyed by integer tuples.

Each stream is a Philox generator whose key comes from hashing
``(seed, *keys)`` with ``SeedSequence``. A stream therefore depends only on
its key, never on which thread asks for it or in what order.
"""

import numpy as np
from numpy.random import Generator, Philox, SeedSequence


def stream(seed: int, *keys: int) -> Generator:
    return Generator(Philox(SeedSequence([int(seed), *map(int, keys)])))


def derive_seed(seed: int, *keys: int) -> int:
    """A 63-bit integer seed for the sub-experiment ``keys`` of ``seed``."""
    words = SeedSequence([int(seed), *map(int, keys)]).generate_state(2, dtype=np.uint32)
    return int(words[0]) << 31 | int(words[1]) >> 1
