"""Seeded random streams.

Every stream is numpy's PCG64 bit generator seeded through a
``SeedSequence``. PCG64 output and numpy's Generator transforms are
specified bit-for-bit across platforms, and nothing here reads system
entropy, so identical seeds give identical draws everywhere.
"""
import numpy as np


class Rng:
    def __init__(self, seed, *keys):
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        ss = np.random.SeedSequence([self.seed, *self.keys])
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, *keys):
        """Independent stream derived from this seed plus ``keys``."""
        return Rng(self.seed, *self.keys, *keys)

    def as_seed(self):
        """Collapse (seed, keys) into a single 63-bit integer seed."""
        if not self.keys:
            return self.seed
        st = np.random.SeedSequence([self.seed, *self.keys]).generate_state(2, np.uint32)
        return int((int(st[0]) << 31) ^ int(st[1]))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def bernoulli(self, p):
        return bool(self._gen.random() < p)

    def permutation(self, n):
        return self._gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, keys={self.keys})"
