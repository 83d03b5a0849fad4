"""Named RNG sub-streams derived from a single run seed.

Every source of randomness (data generation, weight init, dropout, batch
shuffling) pulls from its own named stream so that each stage can be
reproduced independently of the others.
"""

import numpy as np

# Stable stream ids; appending is fine, renumbering breaks reproducibility.
_STREAMS = {
    "data": 0,
    "init": 1,
    "dropout": 2,
    "shuffle": 3,
}


def substream(seed: int, name: str) -> np.random.Generator:
    """Return the generator for one named stream of `seed`."""
    try:
        stream_id = _STREAMS[name]
    except KeyError:
        raise KeyError(f"unknown RNG stream {name!r}; known: {sorted(_STREAMS)}") from None
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, stream_id))))
