import zlib
from typing import Union

import numpy as np

Key = Union[int, str]


def _key_to_int(key: Key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    return int(key)


def make_stream(seed: int, *keys: Key) -> np.random.Generator:
    """Return an independent Philox stream for (seed, *keys).

    Philox is counter-based and SeedSequence spawn keys make the streams
    splittable, so every stochastic op can take its own explicit stream and
    identical (seed, keys) always reproduce the same draws.
    """
    spawn_key = tuple(_key_to_int(k) for k in keys)
    sequence = np.random.SeedSequence(int(seed), spawn_key=spawn_key)
    return np.random.Generator(np.random.Philox(sequence))
