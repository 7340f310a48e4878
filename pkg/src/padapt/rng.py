"""Named random substreams derived from one root seed.

Every source of randomness (data generation, parameter init, batch
sampling) pulls its own generator via a stable name, so experiments that
differ in one variable share every other random draw.
"""

from __future__ import annotations

import numpy as np


def substream(root_seed: int, *names: str | int) -> np.random.Generator:
    """A generator keyed by ``(root_seed, *names)``; stable across runs."""
    entropy: list[int] = [int(root_seed) & 0xFFFFFFFF]
    for name in names:
        if isinstance(name, int):
            entropy.append(name & 0xFFFFFFFFFFFFFFFF)
        else:
            entropy.extend(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy))
