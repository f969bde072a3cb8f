"""Seeded random streams.

Every source of randomness flows from one integer seed through named
sub-streams, so adding a parameter or dropout site never perturbs the
draws of the others.  Stream derivation hashes the name with sha256,
independent of PYTHONHASHSEED.
"""

import hashlib

import numpy as np


def _entropy(seed: int, name: str):
    digest = hashlib.sha256(f"{seed}\x1f{name}".encode()).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def named_rng(seed: int, name: str) -> np.random.Generator:
    """A fresh generator deterministically derived from (seed, name)."""
    return np.random.default_rng(_entropy(seed, name))


class RngHub:
    """Holds one persistent generator per stream name.

    Repeated calls to ``stream(name)`` return the same generator, so its
    state advances across uses; distinct names are independent.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        gen = self._streams.get(name)
        if gen is None:
            gen = named_rng(self.seed, name)
            self._streams[name] = gen
        return gen
