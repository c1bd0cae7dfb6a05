"""Deterministic random streams.

One experiment seed fans out into independent named streams (data
generation, parameter init, shuffling, sketch maps, ...) so that any
single consumer can be re-seeded or held fixed without disturbing the
others.  Streams are keyed by (STREAM_*, seed, extra...) tuples fed to
``numpy.random.SeedSequence``, which is stable across platforms.
"""

import hashlib

import numpy as np

STREAM_DATA = 1
STREAM_INIT = 2
STREAM_SHUFFLE = 3
STREAM_SKETCH = 4
STREAM_TABLE = 5
STREAM_VISUAL = 6
STREAM_TEXT_PROJ = 7
STREAM_BOOTSTRAP = 8
STREAM_HOLDOUT = 9
STREAM_GRADCHECK = 10

_MASK = (1 << 64) - 1


def _as_entropy(key):
    if isinstance(key, str):
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    return int(key) & _MASK


def rng_for(*key) -> np.random.Generator:
    """Return a Generator tied to the given key tuple (ints or strings)."""
    entropy = [_as_entropy(k) for k in key]
    return np.random.default_rng(np.random.SeedSequence(entropy))
