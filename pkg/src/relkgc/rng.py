"""Deterministic random-stream splitting.

Every random decision in the library flows from one 64-bit run seed. Each
subsystem draws from its own child stream, identified by a fixed integer
code plus optional counters (epoch, batch index, trial number), so adding
randomness to one subsystem never shifts the streams of another.
"""

import numpy as np

# Frozen subsystem codes. Changing a value changes every downstream stream,
# which breaks checkpoint-level reproducibility, so append only.
STREAMS = {
    "split": 1,
    "relnet": 2,
    "init": 3,
    "shuffle": 4,
    "negatives": 5,
    "classifier": 6,
    "eval": 7,
    "influence": 8,
    "gradcheck": 9,
}


def substream(seed, name, *counters):
    """Return a Generator for subsystem `name` under the given run seed.

    `counters` are extra non-negative integers (epoch, batch, trial) that
    select independent streams within one subsystem.
    """
    code = STREAMS[name]
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF,
                                spawn_key=(code, *map(int, counters)))
    return np.random.default_rng(ss)
