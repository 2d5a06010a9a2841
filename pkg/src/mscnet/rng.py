"""Seeded random-number context.

All randomness in the package flows from a single integer seed. Child
streams are derived deterministically with ``spawn(key)`` so independent
units of work (e.g. one synthetic sample) get reproducible streams
regardless of evaluation order.
"""

from __future__ import annotations

import numpy as np


class RngContext:
    def __init__(self, seed: int, *keys: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.keys = tuple(int(k) for k in keys)
        seq = np.random.SeedSequence([self.seed, *self.keys])
        self.gen = np.random.Generator(np.random.PCG64(seq))

    def spawn(self, key: int) -> "RngContext":
        return RngContext(self.seed, *self.keys, key)

    def uniform(self, low=0.0, high=1.0, size=None, dtype=np.float64):
        out = self.gen.uniform(low, high, size)
        return np.asarray(out, dtype=dtype) if size is not None else float(out)

    def normal(self, loc=0.0, scale=1.0, size=None, dtype=np.float64):
        out = self.gen.normal(loc, scale, size)
        return np.asarray(out, dtype=dtype) if size is not None else float(out)

    def integers(self, low, high=None, size=None):
        out = self.gen.integers(low, high, size)
        return out if size is not None else int(out)

    def permutation(self, n):
        return self.gen.permutation(n)

    def random(self, size=None):
        out = self.gen.random(size)
        return out if size is not None else float(out)
