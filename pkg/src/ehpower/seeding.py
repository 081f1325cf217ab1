"""Named, index-addressable random substreams derived from one seed.

Every consumer asks for ``substream(seed, name, i)`` instead of sharing a
generator, so results do not depend on scheduling or worker count.
"""
import numpy as np

STREAMS = {"dataset": 1, "split": 2, "train": 3, "eval": 4, "retry": 5}


def substream_seq(seed: int, name: str, *index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=(STREAMS[name], *map(int, index)))


def substream(seed: int, name: str, *index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(substream_seq(seed, name, *index)))
