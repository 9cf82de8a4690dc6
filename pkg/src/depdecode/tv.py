import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Literal

import numpy as np

from depdecode.errors import DimensionMismatch, InvalidDistribution
from depdecode.oracle import (
    MaskState,
    TabularModel,
    conditioned_table,
    conditional_marginal,
)

logger = logging.getLogger(__name__)

DependencySource = Literal["exact", "predicted"]


@dataclass(frozen=True, eq=False)
class DependencyMatrix:
    """
    Pairwise dependencies over the masked positions.

    ``values[i, j]`` is the expected change (in TV) of the conditional of
    ``order[i]`` when ``order[j]`` is revealed. Rows and columns follow the
    ascending masked order. Exact matrices are symmetric; predicted ones need not be.
    """

    order: tuple[int, ...]
    values: np.ndarray
    source: DependencySource = "exact"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        n = len(self.order)
        if values.shape != (n, n):
            raise DimensionMismatch(
                f"Dependency values have shape {values.shape}, expected {(n, n)}"
            )
        if np.any(values < 0) or np.any(values > 1):
            raise ValueError("Dependency values must lie in [0, 1]")
        if np.any(np.diag(values) != 0):
            raise ValueError("Dependency diagonal must be exactly 0")
        object.__setattr__(self, "order", tuple(int(p) for p in self.order))
        object.__setattr__(self, "values", values)

    def at(self, i: int, j: int) -> float:
        """Dependency of position ``i`` on position ``j`` (global positions)."""
        return float(self.values[self.order.index(i), self.order.index(j)])


def tv_distance(p, q) -> float:
    """Total variation distance: half the L1 distance between two distributions."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionMismatch(f"Support shapes differ: {p.shape} vs {q.shape}")
    for name, dist in (("p", p), ("q", q)):
        if np.any(dist < 0) or abs(dist.sum() - 1.0) > 1e-9:
            raise InvalidDistribution(f"{name} is not a probability distribution")
    return float(min(1.0, 0.5 * np.abs(p - q).sum()))


def maximal_coupling_agreement(p, q) -> float:
    """P(A = B) under the maximal coupling of p and q, i.e. 1 - TV(p, q)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionMismatch(f"Support shapes differ: {p.shape} vs {q.shape}")
    return float(np.minimum(p, q).sum())


def dependency_sample(
    model: TabularModel, state: MaskState, i: int, j: int, y_j: int
) -> float:
    """TV between the conditional of ``i`` before and after revealing ``j = y_j``."""
    if i == j:
        raise ValueError("Dependency of a position on itself is undefined")
    state.index(j)
    before = conditional_marginal(model, state, i)
    after = conditional_marginal(model, state.reveal({j: y_j}), i)
    return tv_distance(before, after)


def _pair_table(table: np.ndarray, a: int, b: int) -> np.ndarray:
    """Joint of masked axes (a, b), indexed [y_a, y_b]."""
    others = tuple(x for x in range(table.ndim) if x not in (a, b))
    pair = table.sum(axis=others) if others else table
    return pair if a < b else pair.T


def dependency_matrix_exact(model: TabularModel, state: MaskState) -> DependencyMatrix:
    """
    Expected pairwise dependencies by exact summation over the vocabulary.

    ``D[i, j] = sum_y P(Y_j = y) * TV(P(Y_i), P(Y_i | Y_j = y))``, all under the
    revealed context. Realizations of zero probability contribute nothing.
    """
    table = conditioned_table(model, state)
    n = len(state.masked)
    values = np.zeros((n, n))
    for a in range(n):
        for b in range(n):
            if a == b:
                continue
            pair = _pair_table(table, a, b)
            p_a = pair.sum(axis=1)
            p_b = pair.sum(axis=0)
            support = p_b > 0
            conditionals = pair[:, support] / p_b[support]
            per_value = 0.5 * np.abs(conditionals - p_a[:, None]).sum(axis=0)
            values[a, b] = float(np.dot(p_b[support], per_value))
    return DependencyMatrix(state.masked, np.clip(values, 0.0, 1.0), source="exact")


def subadditivity_slack(
    model: TabularModel,
    state: MaskState,
    target: int,
    subset: Sequence[int],
    realization: Sequence[int],
) -> tuple[float, float]:
    """
    Left and right side of the sub-additivity check for one target.

    Returns:
    --------
    (lhs, rhs)
        lhs is the TV shift of the target's conditional under the joint reveal
        of ``subset = realization``; rhs sums the TV shifts of the single
        reveals. ``rhs - lhs`` is the slack.
    """
    subset = list(subset)
    realization = list(realization)
    if len(subset) != len(realization):
        raise DimensionMismatch("Subset and realization lengths differ")
    if target in subset:
        raise ValueError("Target must lie outside the revealed subset")
    state.index(target)

    before = conditional_marginal(model, state, target)
    joint_reveal = state.reveal(dict(zip(subset, realization, strict=True)))
    lhs = tv_distance(before, conditional_marginal(model, joint_reveal, target))
    rhs = 0.0
    for position, token in zip(subset, realization, strict=True):
        single = conditional_marginal(model, state.reveal({position: token}), target)
        rhs += tv_distance(before, single)
    return lhs, rhs
