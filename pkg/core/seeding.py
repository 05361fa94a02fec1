"""
Seed derivation helpers.

Child seeds are derived with numpy's SeedSequence so that one explicit run
seed fans out into reproducible, non-overlapping streams per stage.
"""
from __future__ import annotations

import numpy as np


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic 32-bit child seed of ``seed`` for the integer path ``keys``."""
    return int(np.random.SeedSequence([int(seed), *[int(k) for k in keys]]).generate_state(1)[0])


def spawn_seeds(seed: int, count: int, stream: int = 0) -> list[int]:
    """``count`` child seeds for replicas, ordered and reproducible."""
    return [derive_seed(seed, stream, i) for i in range(count)]


# Stream identifiers used across pipelines
STREAM_SOUP = 1
STREAM_THINNING = 2
STREAM_FIELDS = 3
STREAM_MARKED_POINTS = 4
STREAM_REFERENCE = 5
