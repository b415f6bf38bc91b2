"""
Counter-based random streams. A stream is addressed by (seed, purpose,
a, b) so draws never depend on the order in which streams are opened.
"""
import numpy as np

_MASK64 = (1 << 64) - 1

SCENE = 1
FLIP = 2
BATCH = 3
PARAM_INIT = 4
GRADCHECK = 5


def counter_rng(seed: int, stream: int, a: int = 0, b: int = 0) -> np.random.Generator:
    key = np.array([seed & _MASK64, stream & _MASK64], dtype=np.uint64)
    counter = np.array([0, 0, a & _MASK64, b & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))
