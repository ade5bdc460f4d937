"""Deterministic random stream derivation.

All randomness flows from a single root seed. Each pipeline stage (and each
item within a stage) gets its own independent stream via a fixed derivation:

    Generator(Philox(SeedSequence(entropy=root_seed, spawn_key=path)))

where ``path`` is a tuple of small integers identifying the stage and item,
e.g. ``(STAGE_WORLD, scene_index)``. Philox is a counter-based 64-bit
generator, so streams are reproducible for a given numpy installation and
independent across distinct paths. Bit-identity across languages or numpy
major versions is not a goal.
"""

from __future__ import annotations

import numpy as np

# Stage tags. Keep values stable forever; corpora regenerate from them.
STAGE_WORLD = 1
STAGE_INIT = 2
STAGE_TRAIN = 3
STAGE_SAMPLE = 4
STAGE_DPO = 5
STAGE_TEST = 99


def stream(root_seed: int, *path: int) -> np.random.Generator:
    """Return the generator for stage/item ``path`` under ``root_seed``."""
    seq = np.random.SeedSequence(entropy=int(root_seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(seq))
