"""Deterministic random streams.

Every random draw in the package flows from a single 64-bit seed through
Philox4x64-10 (a counter-based, splittable generator). Substreams are keyed by
``(seed, (tag << 32) | index)`` so that data generation, splitting, model
initialization and batch sampling never share a stream, and per-domain streams
are independent. The key derivation is part of the on-disk reproducibility
contract and must not change.
"""

from __future__ import annotations

import numpy as np

GENERATOR_NAME = "philox4x64-10"

# Substream tags. New purposes get new tags; existing values are frozen.
TAG_DATA = 1
TAG_SPLIT = 2
TAG_INIT = 3
TAG_BATCH = 4
TAG_TOY = 5

_MASK64 = (1 << 64) - 1


def substream(seed: int, tag: int, index: int = 0) -> np.random.Generator:
    """Return the generator for stream ``(tag, index)`` under ``seed``.

    ``index`` must fit in 32 bits (it shares a word with the tag).
    """
    if not 0 <= index < (1 << 32):
        raise ValueError(f"substream index out of range: {index}")
    key = np.array([seed & _MASK64, ((tag << 32) | index) & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
