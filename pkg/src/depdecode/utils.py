import os

import numpy as np


def ensure_workspace(workspace):
    os.makedirs(workspace, exist_ok=True)


def spawn_rng(seed: int, *ids: int) -> np.random.Generator:
    """Generator keyed on (seed, *ids); independent of call order."""
    return np.random.default_rng([int(seed), *(int(i) for i in ids)])
