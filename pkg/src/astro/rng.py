"""Deterministic random substreams keyed by integer tuples.

Every consumer of randomness in the training loop (candidate decoding, prefix
rollout, noise levels, forward-path noise, window selection, ...) draws from
its own counter-keyed substream, so changing how much one consumer draws never
shifts what another one sees. Keys are plain int tuples fed to numpy's seed
sequence machinery.
"""

from __future__ import annotations

import numpy as np

# Stream kind tags, second component of every key after the run seed.
PROMPT_STREAM = 1
CANDIDATE_STREAM = 2
PREFIX_STREAM = 3
NOISE_T_STREAM = 4
EPS_STREAM = 5
WINDOW_STREAM = 6
PRETRAIN_STREAM = 7
EVAL_STREAM = 8


def substream(*key: int) -> np.random.Generator:
    """Independent generator for an integer key tuple. Same key, same stream."""
    if not key:
        raise ValueError("substream key must be non-empty")
    return np.random.default_rng(tuple(int(k) for k in key))


class CountingStream:
    """Generator wrapper that counts standard_normal calls.

    Tests use it to audit draw budgets (e.g. a sampler consumes exactly one
    draw per step, a group rollout never touches the prefix stream).
    """

    def __init__(self, gen: np.random.Generator):
        self.gen = gen
        self.draws = 0

    def standard_normal(self, size=None):
        self.draws += 1
        return self.gen.standard_normal(size)
