"""Seedable random streams with reproducible fork-by-label sub-streams."""

from __future__ import annotations

import zlib

import numpy as np


class RngStream:
    """Deterministic PCG64 generator that can fork named child streams.

    Identical seed + identical call sequence gives identical outputs.
    Forking with the same label always yields the same child stream,
    independent of how much the parent has already been consumed.
    """

    def __init__(self, seed: int | np.random.SeedSequence):
        if isinstance(seed, np.random.SeedSequence):
            self._ss = seed
        else:
            self._ss = np.random.SeedSequence(int(seed))
        self.gen = np.random.Generator(np.random.PCG64(self._ss))

    def fork(self, label: str) -> "RngStream":
        key = zlib.crc32(label.encode("utf-8"))
        child = np.random.SeedSequence(
            entropy=self._ss.entropy,
            spawn_key=tuple(self._ss.spawn_key) + (key,),
        )
        return RngStream(child)

    # -- convenience wrappers ------------------------------------------------

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size=size, replace=replace)

    def permutation(self, x):
        return self.gen.permutation(x)

    # -- checkpoint support --------------------------------------------------

    def get_state(self) -> dict:
        return self.gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.gen.bit_generator.state = state
