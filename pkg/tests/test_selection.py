import numpy as np
import pytest

from depdecode.errors import DimensionMismatch, EmptyMaskSet
from depdecode.oracle import MaskState, all_marginals
from depdecode.selection import (
    GAMMA_GRID,
    TAU_GRID,
    SelectionConfig,
    greedy_subset_select,
)
from depdecode.tv import DependencyMatrix, dependency_matrix_exact


def _random_dep(rng, n):
    values = rng.uniform(0.0, 0.2, size=(n, n))
    np.fill_diagonal(values, 0.0)
    return DependencyMatrix(tuple(range(n)), values)


def test_config_validation():
    with pytest.raises(ValueError):
        SelectionConfig(tau=-0.1)
    with pytest.raises(ValueError):
        SelectionConfig(gamma=1.5)
    assert SelectionConfig(tau=float("inf")).tau == float("inf")


def test_grids():
    assert len(TAU_GRID) * len(GAMMA_GRID) == 60


def test_zero_dependencies_take_everything():
    dep = DependencyMatrix((0, 1, 2, 3), np.zeros((4, 4)))
    result = greedy_subset_select(dep, (0, 1, 2, 3), np.full(4, 0.95), SelectionConfig())
    assert result.chosen == (0, 1, 2, 3)
    assert result.accumulated == 0.0


def test_arithmetic_budget(arithmetic_model):
    """Test that the dependent pair is only co-selected under a loose budget."""
    state = MaskState.from_revealed(3, {0: 1})
    dep = dependency_matrix_exact(arithmetic_model, state)
    top1 = all_marginals(arithmetic_model, state).max(axis=1)

    tight = greedy_subset_select(dep, state.masked, top1, SelectionConfig(tau=0.04, gamma=0.0))
    assert tight.chosen == (1,)
    assert tight.accumulated == 0.0

    loose = greedy_subset_select(dep, state.masked, top1, SelectionConfig(tau=1.0, gamma=0.0))
    assert loose.chosen == (1, 2)
    assert loose.accumulated == pytest.approx(2 / 3)
    assert loose.per_pick_delta == (0.0, pytest.approx(2 / 3))


def test_zero_budget_picks_one():
    rng = np.random.default_rng(0)
    dep = _random_dep(rng, 5)
    dep = DependencyMatrix(dep.order, dep.values + 0.01 * (1 - np.eye(5)))
    result = greedy_subset_select(dep, dep.order, np.ones(5), SelectionConfig(tau=0.0, gamma=0.0))
    assert result.chosen == (0,)


def test_first_pick_ignores_confidence():
    dep = DependencyMatrix((3, 4), np.zeros((2, 2)))
    result = greedy_subset_select(dep, (3, 4), np.array([0.1, 0.1]), SelectionConfig(gamma=0.9))
    assert result.chosen == (3,)


def test_confidence_filter_is_strict():
    dep = DependencyMatrix((0, 1), np.zeros((2, 2)))
    result = greedy_subset_select(dep, (0, 1), np.array([1.0, 0.9]), SelectionConfig(gamma=0.9))
    assert result.chosen == (0,)


def test_ties_go_to_lowest_position():
    dep = DependencyMatrix((0, 1, 2), np.zeros((3, 3)))
    result = greedy_subset_select(dep, (0, 1, 2), np.ones(3), SelectionConfig(tau=0.0, gamma=0.0))
    assert result.chosen == (0, 1, 2)


def test_picks_cheapest_candidate():
    values = np.array(
        [
            [0.0, 0.0, 0.0],
            [0.3, 0.0, 0.0],
            [0.1, 0.0, 0.0],
        ]
    )
    dep = DependencyMatrix((0, 1, 2), values)
    result = greedy_subset_select(dep, (0, 1, 2), np.ones(3), SelectionConfig(tau=0.2, gamma=0.0))
    assert result.chosen == (0, 2)
    assert result.accumulated == pytest.approx(0.1)


def test_budget_and_prefix_properties():
    """Test the budget audit and the prefix property in tau on random matrices."""
    rng = np.random.default_rng(42)
    for _ in range(200):
        n = int(rng.integers(1, 7))
        dep = _random_dep(rng, n)
        top1 = rng.uniform(0.0, 1.0, n)
        gamma = float(rng.choice([0.0, 0.5, 0.9]))
        previous = None
        for tau in sorted(TAU_GRID):
            result = greedy_subset_select(dep, dep.order, top1, SelectionConfig(tau, gamma))
            assert result.chosen[0] == 0
            assert len(result.per_pick_delta) == len(result.chosen)
            assert result.accumulated == pytest.approx(sum(result.per_pick_delta))
            assert result.accumulated <= tau
            if previous is not None:
                assert result.chosen[: len(previous)] == previous
            previous = result.chosen
            again = greedy_subset_select(dep, dep.order, top1, SelectionConfig(tau, gamma))
            assert again == result


def test_errors():
    dep = DependencyMatrix((), np.zeros((0, 0)))
    with pytest.raises(EmptyMaskSet):
        greedy_subset_select(dep, (), np.zeros(0), SelectionConfig())
    dep = DependencyMatrix((0, 1), np.zeros((2, 2)))
    with pytest.raises(DimensionMismatch):
        greedy_subset_select(dep, (0, 2), np.ones(2), SelectionConfig())
    with pytest.raises(DimensionMismatch):
        greedy_subset_select(dep, (0, 1), np.ones(3), SelectionConfig())
