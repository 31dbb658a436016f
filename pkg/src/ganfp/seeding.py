"""Deterministic fan-out of one global seed into named substreams.

Stream names hash into the seed material, so adding a consumer of one
stream never shifts the draws seen by any other stream.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["named_rng"]


def named_rng(seed: int, stream: str) -> np.random.Generator:
    tag = int.from_bytes(hashlib.sha256(stream.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))
