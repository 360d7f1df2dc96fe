"""Deterministic RNG derivation.

Every stochastic routine in the package takes an integer seed and derives
its generator through :func:`derive_rng`, so distinct purposes (stream
splits, episode draws, weight init, ...) never share a random stream even
when the user passes the same seed everywhere.
"""

from __future__ import annotations

import numpy as np

# purpose tags; values are arbitrary but frozen (changing one changes results)
STREAM = 101
EPISODE = 102
INIT_BACKBONE = 201
INIT_HEAD = 202
INIT_EDGE = 203
INIT_ATTENTION = 204
PRETRAIN = 301
META = 302
PSEUDO_TASK = 303
FINETUNE = 304
DATASET = 400

_MASK = (1 << 63) - 1


def derive_rng(seed: int, *tags: int) -> np.random.Generator:
    """Return a generator keyed by (seed, tags); same inputs, same stream."""
    entropy = int(seed) & _MASK
    key = tuple(int(t) & _MASK for t in tags)
    return np.random.default_rng(np.random.SeedSequence(entropy=entropy, spawn_key=key))
