"""Seeded, splittable random streams.

Every stochastic routine takes an explicit ``numpy.random.Generator``.
Philox is counter-based, so child streams from :func:`split` are
independent and reproducible regardless of how many draws the parent made.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def split(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    return rng.spawn(n)


def stream(seed: int, index: int) -> np.random.Generator:
    """Child stream ``index`` of ``seed``; fixed per role so stages can rerun independently."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(index,))))
