"""Named, counter-based random streams.

Every random draw in a run comes from a stream keyed by (subsystem, node id,
extra...). Streams are derived from the master seed with Philox spawn keys, so
the values of one stream never depend on how many other streams exist or in
which order they were first touched. Adding nodes to a scenario therefore
never perturbs the draws of existing nodes.
"""
from __future__ import annotations

import numpy as np

# Stable subsystem ids; append only, never renumber.
SUBSYSTEMS = {
    "init": 0,
    "data": 1,
    "mobility": 2,
    "transmit": 3,
    "probe": 4,
    "test": 5,
    "validation": 6,
    "adversary": 7,
    "replay": 8,
}


def derive_seed(master_seed: int, subsystem: str, *key: int) -> int:
    """A 64-bit integer seed unique to (master seed, subsystem, key)."""
    ss = np.random.SeedSequence(master_seed, spawn_key=(SUBSYSTEMS[subsystem], *key))
    return int(ss.generate_state(2, dtype=np.uint64)[0])


def stream(master_seed: int, subsystem: str, *key: int) -> np.random.Generator:
    """Independent generator for (master seed, subsystem, key)."""
    ss = np.random.SeedSequence(master_seed, spawn_key=(SUBSYSTEMS[subsystem], *key))
    return np.random.Generator(np.random.Philox(ss))
