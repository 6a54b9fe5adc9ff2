"""Named random sub-streams derived from a single integer seed."""

import zlib

import numpy as np

STREAMS = ("data", "init", "pairs", "shuffle", "split", "hpo", "trial")


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for stream ``name`` under ``seed``.

    ``extra`` integers further index the stream, e.g. a trial id, so that
    ``substream(7, "hpo", 3)`` is reproducible in isolation.
    """
    key = (zlib.crc32(name.encode("utf-8")),) + tuple(int(e) for e in extra)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


def derive_seed(seed: int, name: str, *extra: int) -> int:
    return int(substream(seed, name, *extra).integers(0, 2**31 - 1))
