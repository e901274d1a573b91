"""Deterministic random-stream derivation.

All randomness in the project flows through `stream`, which maps a run seed
plus a purpose label (and an optional counter) to an independent numpy
Generator.  Replaying the same (seed, purpose, counter) triple always yields
the same draws, which is what makes training runs and scene generation
byte-reproducible.
"""

import zlib

import numpy as np


def stream(seed: int, purpose: str, counter: int = 0) -> np.random.Generator:
    """Return a Generator keyed by (seed, purpose, counter)."""
    key = zlib.crc32(purpose.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key, int(counter)]))


def child_seed(seed: int, purpose: str, counter: int = 0) -> int:
    """Derive a plain integer seed from (seed, purpose, counter)."""
    key = zlib.crc32(purpose.encode("utf-8"))
    ss = np.random.SeedSequence([int(seed), key, int(counter)])
    return int(ss.generate_state(1)[0])
