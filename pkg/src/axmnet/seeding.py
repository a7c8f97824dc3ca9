"""Deterministic named random streams.

Every source of randomness in the project draws from a stream derived from
(master_seed, stream_name). Streams are independent, so enabling or
disabling one component never shifts the numbers another component sees.
"""

import hashlib

import numpy as np


def _name_key(name):
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def seed_for(master_seed, name):
    """64-bit seed material for a named substream."""
    return np.random.SeedSequence([int(master_seed) & 0xFFFFFFFFFFFFFFFF, _name_key(name)])


def stream(master_seed, name):
    """A Generator for the named substream of master_seed."""
    return np.random.default_rng(seed_for(master_seed, name))
