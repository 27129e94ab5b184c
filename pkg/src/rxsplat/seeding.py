"""Seed splitting.

Every random stream is a Philox generator keyed by (run seed, stream id).
Philox is counter-based, so two streams with different ids never overlap
and a stream's values do not depend on how many other streams exist or in
which order they are drawn. Stream ids are derived from a stable name, so
adding a new stream never shifts an existing one.
"""

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def stream_id(name: str) -> int:
    """Stable 64-bit id for a stream name."""
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def make_rng(seed: int, name: str) -> np.random.Generator:
    """Create the generator for one named stream.

    Args:
        seed: Run seed (any non-negative integer, reduced to 64 bits)
        name: Stream name, e.g. "trainer.stage1.sampling"

    Returns:
        numpy Generator backed by Philox
    """
    key = np.array([int(seed) & MASK64, stream_id(name)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
