"""Deterministic RNG sub-streams.

Every random draw in a run comes from a generator keyed by
``(seed, kind, step, prompt, trajectory, ...)``.  Streams for different keys
are statistically independent, so adding auxiliary sampling never shifts the
draws used for main chains.
"""
from __future__ import annotations

import numpy as np

MAIN = 0
PIVOT = 1
AUX = 2
EVAL = 3


def substream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


class Streams:
    """Factory for the per-(prompt, trajectory, branch) generators of one run."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def main(self, step: int, prompt: int, i: int) -> np.random.Generator:
        return substream(self.seed, MAIN, step, prompt, i)

    def pivot(self, step: int, prompt: int, i: int) -> np.random.Generator:
        return substream(self.seed, PIVOT, step, prompt, i)

    def aux(self, step: int, prompt: int, i: int, j: int, k: int) -> np.random.Generator:
        return substream(self.seed, AUX, step, prompt, i, j, k)

    def eval(self, step: int, prompt: int) -> np.random.Generator:
        return substream(self.seed, EVAL, step, prompt)
