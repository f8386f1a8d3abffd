"""Seed-splitting policy: one 64-bit master seed per run, child streams
derived by counter so subsystems are independently reproducible."""

from __future__ import annotations

import numpy as np

# Fixed stream indices; adding a subsystem means appending here, never
# renumbering, or previously published artifacts change.
STREAMS = {
    "init": 0,
    "noise": 1,
    "shuffle": 2,
    "sampler": 3,
    "proposal": 4,
    "collocation": 5,
    "stimulus": 6,
}


def child_seed_seq(master_seed: int, stream: int | str) -> np.random.SeedSequence:
    idx = STREAMS[stream] if isinstance(stream, str) else int(stream)
    return np.random.SeedSequence(entropy=int(master_seed) & (2**64 - 1),
                                  spawn_key=(idx,))


def child_rng(master_seed: int, stream: int | str) -> np.random.Generator:
    return np.random.default_rng(child_seed_seq(master_seed, stream))
