"""Named, keyed random substreams derived from one root seed.

A stream is fully determined by ``(seed, purpose, *keys)``, so draws made by one
client or round never shift the draws of another, and results do not depend on
the order in which parallel workers run.
"""

from __future__ import annotations

import numpy as np

PURPOSES = {
    "init": 0,
    "select": 1,
    "shuffle": 2,
    "net": 3,
    "gan": 4,
    "data": 5,
    "partition": 6,
    "split": 7,
    "synth": 8,
    "gan_init": 9,
}


def substream(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    if seed < 0 or any(k < 0 for k in keys):
        raise ValueError("seeds and stream keys must be non-negative")
    spawn_key = (PURPOSES[purpose],) + tuple(int(k) for k in keys)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=spawn_key))


def derive_seed(seed: int, purpose: str, *keys: int) -> int:
    """A plain integer seed for APIs that take one (e.g. ``init_model``)."""
    return int(substream(seed, purpose, *keys).integers(0, 2**63 - 1))
