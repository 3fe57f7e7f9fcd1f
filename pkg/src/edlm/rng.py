"""Deterministic, splittable random number generation.

All stochastic code in the package draws from a SplitRng. Child generators
are derived by hashing the parent key with a label, so every consumer gets
an independent Philox (counter-based) stream and results never depend on
draw order elsewhere in the program.
"""
from __future__ import annotations

import hashlib

import numpy as np


class SplitRng:
    """Seeded counter-based generator that can be split by label."""

    def __init__(self, seed: int, _key: bytes | None = None):
        if _key is None:
            _key = hashlib.sha256(b"edlm-rng:" + str(int(seed)).encode()).digest()
        self._key = _key
        philox_key = int.from_bytes(_key[:16], "little")
        self.gen = np.random.Generator(np.random.Philox(key=philox_key))

    def split(self, *labels: object) -> "SplitRng":
        """Derive an independent child stream named by `labels`."""
        h = hashlib.sha256(self._key)
        for label in labels:
            h.update(b"/" + repr(label).encode())
        return SplitRng(0, _key=h.digest())

    # Thin pass-throughs for the draws the package uses.
    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high=high, size=size)

    def random(self, size=None):
        return self.gen.random(size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size=size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size=size, replace=replace)
