"""Seeded random streams on a counter-based generator.

Every stochastic stage of a run (data simulation, weight init, training noise,
evaluation draws) pulls from its own stream, keyed by (seed, stream id), so
streams never overlap and any single stage is reproducible in isolation.
"""

from enum import IntEnum

import numpy as np


class Stream(IntEnum):
    DATA = 0
    INIT = 1
    TRAIN = 2
    EVAL = 3
    INFER = 4
    BASELINE = 5


def stream(seed: int, stream_id: int) -> np.random.Generator:
    """Independent generator for (seed, stream_id); counter-based, so splittable."""
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(int(stream_id))])
    return np.random.Generator(np.random.Philox(key=key))
