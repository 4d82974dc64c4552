"""Named random substreams derived from one root seed.

Every randomized component (phantom generation, initialization, sampling,
dropout, registration) pulls its generator from here so runs are reproducible
from a single seed and components stay independently reproducible.
"""

import zlib

import numpy as np


def substream(root_seed, *names):
    """Return a Generator for the substream identified by `names`.

    The same (root_seed, names) pair always yields the same stream; distinct
    names yield statistically independent streams.
    """
    key = tuple(zlib.crc32(str(part).encode("utf-8")) for part in names)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(root_seed), spawn_key=key))
