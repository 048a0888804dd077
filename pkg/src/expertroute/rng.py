"""Named, counter-based random streams.

Every random draw in the pipeline comes from a stream identified by a
(seed, name) pair, backed by Philox.  Streams with different names are
independent, and the same pair always yields the same sequence, so any
stage can be rerun in isolation and reproduce its draws exactly.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, name: str) -> int:
    """128-bit Philox key derived from the run seed and a stream name."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


def named_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named stream of a seeded run."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, name)))
