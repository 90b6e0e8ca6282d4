"""Deterministic seed fan-out.

One master seed is split into named, independent sub-streams via numpy
``SeedSequence`` spawn keys. Streams are identified by a domain tag plus
optional indices (client id, round number), so the sequence a consumer
sees never depends on what other consumers drew first.
"""

from __future__ import annotations

import numpy as np

# Domain tags. Appending new tags never disturbs existing streams.
INIT = 0
DATA = 1
PARTITION = 2
SPLIT = 3
SAMPLING = 4
CLIENT = 5
PERSONAL = 6


def spawn_rng(master_seed: int, *key: int) -> np.random.Generator:
    """Generator for the stream named by (domain tag, indices...)."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=tuple(key)))


def spawn_seed(master_seed: int, *key: int) -> int:
    """Integer sub-seed for APIs that take a plain seed."""
    return int(np.random.SeedSequence(master_seed, spawn_key=tuple(key)).generate_state(1)[0])
