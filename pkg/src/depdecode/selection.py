import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from depdecode.errors import DimensionMismatch, EmptyMaskSet
from depdecode.tv import DependencyMatrix

logger = logging.getLogger(__name__)

# Search grids for the dependency bound and confidence threshold.
TAU_GRID = (0.5, 0.4, 0.3, 0.2, 0.1, 0.08, 0.06, 0.04, 0.02, 0.01, 0.003, 0.001)
GAMMA_GRID = (0.9, 0.7, 0.5, 0.3, 0.1)


@dataclass(frozen=True)
class SelectionConfig:
    tau: float = 0.04
    gamma: float = 0.9

    def __post_init__(self):
        if not self.tau >= 0:
            raise ValueError("tau must be non-negative")
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must be in [0, 1]")


@dataclass(frozen=True)
class SelectionResult:
    chosen: tuple[int, ...]
    accumulated: float
    # One entry per chosen position; the forced first pick costs 0.
    per_pick_delta: tuple[float, ...]


def greedy_subset_select(
    dep: DependencyMatrix,
    masked: Sequence[int],
    top1,
    cfg: SelectionConfig,
) -> SelectionResult:
    """
    Grow a subset of masked positions whose summed pairwise dependency stays
    within ``cfg.tau``.

    Parameters:
    -----------
    dep : DependencyMatrix
        Dependencies indexed by the ascending masked order
    masked : sequence of int
        Masked positions, ascending; must equal ``dep.order``
    top1 : array-like
        Top-1 probability of each masked position, aligned with ``masked``
    cfg : SelectionConfig
        Dependency bound tau and confidence threshold gamma

    Returns:
    --------
    SelectionResult
        Positions in pick order, the accumulated dependency and the cost of
        each pick

    Notes:
    ------
    The left-most masked position is always taken first, without the
    confidence filter. Each later pick is the confident candidate with the
    smallest summed dependency on the positions already chosen; ties go to
    the lower position. Selection stops when no candidate passes the
    confidence filter or when the next pick would push the total above tau.
    """
    masked = tuple(int(p) for p in masked)
    if not masked:
        raise EmptyMaskSet("Cannot select from an empty mask set")
    if dep.order != masked:
        raise DimensionMismatch(f"Dependency order {dep.order} != masked {masked}")
    top1 = np.asarray(top1, dtype=np.float64)
    if top1.shape != (len(masked),):
        raise DimensionMismatch(f"top1 has shape {top1.shape}, expected ({len(masked)},)")

    confident = top1 > cfg.gamma
    taken = np.zeros(len(masked), dtype=bool)
    taken[0] = True
    chosen = [masked[0]]
    deltas = [0.0]
    accumulated = 0.0
    # cost[c] = sum over chosen s of D[c, s]
    cost = dep.values[:, 0].copy()

    while True:
        candidates = confident & ~taken
        if not candidates.any():
            break
        best = int(np.argmin(np.where(candidates, cost, np.inf)))
        delta = float(cost[best])
        if accumulated + delta > cfg.tau:
            break
        taken[best] = True
        chosen.append(masked[best])
        deltas.append(delta)
        accumulated += delta
        cost += dep.values[:, best]

    logger.debug("Selected %s with accumulated dependency %.6g", chosen, accumulated)
    return SelectionResult(tuple(chosen), accumulated, tuple(deltas))
