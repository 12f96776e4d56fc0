"""Deterministic random-stream derivation.

All randomness in a run flows from one root seed. Substreams are split
counter-style by hashing a key path (purpose string, client id, round, ...)
into a Philox spawn key, so any component can be re-derived independently
of execution order or thread scheduling.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_part(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream key parts must be non-negative, got {part}")
        return int(part)
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"unsupported stream key part: {part!r}")


def stream(root_seed: int, *key_path) -> np.random.Generator:
    """Return an independent Generator for (root_seed, *key_path).

    Identical arguments always yield an identical stream; distinct key
    paths yield statistically independent streams.
    """
    spawn_key = tuple(_key_part(p) for p in key_path)
    seq = np.random.SeedSequence(entropy=int(root_seed), spawn_key=spawn_key)
    return np.random.Generator(np.random.Philox(seq))
