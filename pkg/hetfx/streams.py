"""Per-task random streams.

Task ``index`` under ``seed`` always gets the same counter-based Philox
stream, so results do not depend on how tasks are spread across workers.
"""

from __future__ import annotations

import numpy as np


def task_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index,))))
