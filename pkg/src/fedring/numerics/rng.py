import hashlib
import struct

import numpy as np


def _stream_words(stream: str) -> list[int]:
    digest = hashlib.blake2b(stream.encode("utf-8"), digest_size=16).digest()
    return list(struct.unpack("<4I", digest))


def seeded_rng(seed: int, stream: str, *keys: int) -> np.random.Generator:
    """Deterministic generator keyed by (seed, stream name, integer keys).

    Philox is counter-based, and the key is derived with a fixed hash, so the
    draw sequence is independent of the platform and of the order in which
    streams are created.
    """
    if seed < 0 or any(k < 0 for k in keys):
        raise ValueError("seed and keys must be non-negative")
    words = [seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF, *_stream_words(stream)]
    for k in keys:
        words.extend((k & 0xFFFFFFFF, (k >> 32) & 0xFFFFFFFF))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))
