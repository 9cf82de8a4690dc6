"""Iterative masked decoding with pluggable position selectors.

Each step runs one forward pass (the marginals of every masked position),
asks a selector which positions to commit, samples those positions
independently from their transformed marginals, and reveals them.
"""

import json
import logging
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from scipy.stats import entropy

from depdecode.errors import EmptyMaskSet, NoProgress, ZeroProbabilityContext
from depdecode.oracle import MaskState, TabularModel, VocabSpec, all_marginals
from depdecode.sampling import SamplerConfig, sample_from_uniform, transform_distribution
from depdecode.selection import SelectionConfig, SelectionResult, greedy_subset_select
from depdecode.tv import DependencyMatrix, dependency_matrix_exact

logger = logging.getLogger(__name__)

KL_EPSILON = 1e-12

SELECTOR_NAMES = ("demask", "entropy", "top1", "token-order", "klass")

KL_GRID = (0.02, 0.015, 0.01, 0.005, 0.001, 0.0003, 0.0001, 0.00003, 0.00001)
CONF_GRID = (0.5, 0.6, 0.7, 0.8, 0.9)


@dataclass(frozen=True)
class KlassConfig:
    kl_threshold: float = 0.0003
    conf_threshold: float = 0.9
    history_len: int = 2

    def __post_init__(self):
        if not self.kl_threshold >= 0:
            raise ValueError("kl_threshold must be non-negative")
        if not 0 <= self.conf_threshold <= 1:
            raise ValueError("conf_threshold must be in [0, 1]")
        if self.history_len < 1:
            raise ValueError("history_len must be positive")


class MarginalHistory:
    """Marginal snapshots per masked position from earlier steps, oldest first."""

    def __init__(self, maxlen: int, snapshots: Mapping[int, tuple] | None = None):
        self.maxlen = maxlen
        self._snapshots = dict(snapshots or {})

    def get(self, position: int) -> tuple[np.ndarray, ...]:
        return self._snapshots.get(position, ())

    def pushed(self, state: MaskState, marginals: np.ndarray) -> "MarginalHistory":
        if self.maxlen == 0:
            return self
        snapshots = {}
        for row, position in enumerate(state.masked):
            previous = self._snapshots.get(position, ())
            snapshots[position] = (*previous, marginals[row])[-self.maxlen :]
        return MarginalHistory(self.maxlen, snapshots)


@dataclass(frozen=True)
class StepContext:
    model: TabularModel
    state: MaskState
    # Untransformed marginals, one row per masked position.
    marginals: np.ndarray
    history: MarginalHistory


@dataclass(frozen=True)
class SelectorChoice:
    positions: tuple[int, ...]
    per_pick_delta: tuple[float, ...] = ()
    selection: SelectionResult | None = None


class Selector(Protocol):
    name: str
    history_len: int

    def select(self, ctx: StepContext) -> SelectorChoice: ...


def _check_masked(masked: Sequence[int]):
    if len(masked) == 0:
        raise EmptyMaskSet("Cannot select from an empty mask set")


def _top_k(scores: np.ndarray, masked: Sequence[int], k: int) -> tuple[int, ...]:
    # Stable sort keeps ties in ascending position order.
    order = np.argsort(scores, kind="stable")[:k]
    return tuple(int(masked[i]) for i in order)


def select_entropy_k(marginals: np.ndarray, masked: Sequence[int], k: int):
    """The ``k`` masked positions with the lowest marginal entropy."""
    _check_masked(masked)
    if k < 1:
        raise ValueError("k must be at least 1")
    return _top_k(entropy(marginals, axis=1), masked, k)


def select_top1_k(marginals: np.ndarray, masked: Sequence[int], k: int):
    """The ``k`` masked positions with the highest top-1 probability."""
    _check_masked(masked)
    if k < 1:
        raise ValueError("k must be at least 1")
    return _top_k(-marginals.max(axis=1), masked, k)


def select_token_order_k(marginals: np.ndarray, masked: Sequence[int], k: int):
    """The ``k`` left-most masked positions."""
    _check_masked(masked)
    if k < 1:
        raise ValueError("k must be at least 1")
    return tuple(int(p) for p in sorted(masked)[:k])


def kl_divergence(p, q) -> float:
    """KL(p || q) with an epsilon guard inside the logs."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return float(np.sum(p * (np.log(p + KL_EPSILON) - np.log(q + KL_EPSILON))))


def select_klass(
    history: MarginalHistory,
    marginals: np.ndarray,
    masked: Sequence[int],
    cfg: KlassConfig,
) -> tuple[int, ...]:
    """
    Positions whose marginals stayed stable over the history window and are
    confident now.

    A position qualifies when it has ``cfg.history_len`` earlier snapshots,
    every consecutive pair in (snapshots..., current) has
    KL(later || earlier) below ``cfg.kl_threshold``, and its current top-1
    probability exceeds ``cfg.conf_threshold``. With no qualifier the single
    most confident position is returned.
    """
    _check_masked(masked)
    top1 = marginals.max(axis=1)
    chosen = []
    for row, position in enumerate(masked):
        snapshots = history.get(position)
        if len(snapshots) < cfg.history_len:
            continue
        chain = (*snapshots[-cfg.history_len :], marginals[row])
        worst = max(kl_divergence(b, a) for a, b in zip(chain, chain[1:]))
        if worst < cfg.kl_threshold and top1[row] > cfg.conf_threshold:
            chosen.append(int(position))
    if not chosen:
        return (int(masked[int(np.argmax(top1))]),)
    return tuple(chosen)


@dataclass(frozen=True)
class EntropySelector:
    k: int = 1
    name: str = "entropy"
    history_len: int = 0

    def select(self, ctx: StepContext) -> SelectorChoice:
        return SelectorChoice(select_entropy_k(ctx.marginals, ctx.state.masked, self.k))


@dataclass(frozen=True)
class TopOneSelector:
    k: int = 1
    name: str = "top1"
    history_len: int = 0

    def select(self, ctx: StepContext) -> SelectorChoice:
        return SelectorChoice(select_top1_k(ctx.marginals, ctx.state.masked, self.k))


@dataclass(frozen=True)
class TokenOrderSelector:
    k: int = 1
    name: str = "token-order"
    history_len: int = 0

    def select(self, ctx: StepContext) -> SelectorChoice:
        return SelectorChoice(
            select_token_order_k(ctx.marginals, ctx.state.masked, self.k)
        )


@dataclass(frozen=True)
class KlassSelector:
    cfg: KlassConfig = field(default_factory=KlassConfig)
    name: str = "klass"

    @property
    def history_len(self) -> int:
        return self.cfg.history_len

    def select(self, ctx: StepContext) -> SelectorChoice:
        positions = select_klass(ctx.history, ctx.marginals, ctx.state.masked, self.cfg)
        return SelectorChoice(positions)


DependencyFn = Callable[[TabularModel, MaskState], DependencyMatrix]


@dataclass(frozen=True)
class DemaskSelector:
    """Greedy dependency-bounded selection over exact or predicted dependencies."""

    cfg: SelectionConfig = field(default_factory=SelectionConfig)
    dependency: DependencyFn = dependency_matrix_exact
    name: str = "demask"
    history_len: int = 0

    def select(self, ctx: StepContext) -> SelectorChoice:
        dep = self.dependency(ctx.model, ctx.state)
        result = greedy_subset_select(
            dep, ctx.state.masked, ctx.marginals.max(axis=1), self.cfg
        )
        return SelectorChoice(result.chosen, result.per_pick_delta, result)


def build_selector(
    name: str,
    *,
    k: int = 1,
    tau: float = 0.04,
    gamma: float = 0.9,
    kl_threshold: float = 0.0003,
    conf_threshold: float = 0.9,
    history_len: int = 2,
    dependency: DependencyFn | None = None,
) -> Selector:
    if name == "demask":
        return DemaskSelector(
            SelectionConfig(tau=tau, gamma=gamma),
            dependency=dependency or dependency_matrix_exact,
        )
    if name == "entropy":
        return EntropySelector(k)
    if name == "top1":
        return TopOneSelector(k)
    if name == "token-order":
        return TokenOrderSelector(k)
    if name == "klass":
        return KlassSelector(KlassConfig(kl_threshold, conf_threshold, history_len))
    raise ValueError(f"Unknown selector {name!r}; expected one of {SELECTOR_NAMES}")


def eos_fill(
    state: MaskState, sampled: Mapping[int, int], vocab: VocabSpec
) -> MaskState:
    """
    Reveal every masked position right of the first EOS as EOS.

    ``sampled`` values not yet committed to ``state`` are committed first.
    """
    pending = {p: v for p, v in sampled.items() if p in state.masked}
    if pending:
        state = state.reveal(pending)
    eos_positions = [p for p, v in state.revealed.items() if v == vocab.eos_id]
    if not eos_positions:
        return state
    first = min(eos_positions)
    fill = {p: vocab.eos_id for p in state.masked if p > first}
    return state.reveal(fill) if fill else state


def commit(
    state: MaskState, sampled: Mapping[int, int], vocab: VocabSpec, fill: bool
) -> tuple[MaskState, tuple[int, ...]]:
    """Reveal sampled tokens, then optionally fast-fill; returns filled positions."""
    committed = state.reveal(sampled)
    if not fill:
        return committed, ()
    filled_state = eos_fill(committed, {}, vocab)
    filled = tuple(p for p in committed.masked if p not in filled_state.masked)
    return filled_state, filled


def checked_positions(choice: SelectorChoice, state: MaskState) -> tuple[int, ...]:
    """Selected positions in pick order, duplicates dropped."""
    positions = tuple(dict.fromkeys(int(p) for p in choice.positions))
    if not positions:
        raise NoProgress("Selector returned no positions")
    for position in positions:
        state.index(position)
    return positions


@dataclass(frozen=True)
class DecodeStep:
    index: int
    state: MaskState
    # Pick order; per_pick_delta lines up with it for the demask selector.
    positions: tuple[int, ...]
    per_pick_delta: tuple[float, ...]
    sampled: dict[int, int]
    filled: tuple[int, ...] = ()


@dataclass
class DecodeTrace:
    prompt_id: str
    selector: str
    prompt: dict[int, int] = field(default_factory=dict)
    steps: list[DecodeStep] = field(default_factory=list)
    eos_filled: tuple[int, ...] = ()

    @property
    def step_count(self) -> int:
        return len(self.steps)

    @property
    def mean_tokens_per_step(self) -> float:
        if not self.steps:
            return 0.0
        return float(np.mean([len(s.positions) for s in self.steps]))

    def records(self) -> list[dict]:
        return [
            {
                "step": s.index,
                "positions": list(s.positions),
                "per_pick_delta": list(s.per_pick_delta),
                "sampled": [[p, v] for p, v in sorted(s.sampled.items())],
                "filled": list(s.filled),
            }
            for s in self.steps
        ]


def write_trace(trace: DecodeTrace, path):
    with open(path, "w") as f:
        for record in trace.records():
            f.write(json.dumps(record) + "\n")


def decode(
    model: TabularModel,
    selector: Selector,
    sampler_cfg: SamplerConfig,
    rng: np.random.Generator,
    eos_fill: bool = False,
    prompt: Mapping[int, int] | None = None,
) -> tuple[tuple[int, ...], DecodeTrace]:
    """
    Decode one sequence, committing the selector's positions at every step.

    Parameters:
    -----------
    model : TabularModel
        Backbone answering the forward passes
    selector : Selector
        Position selector, see ``build_selector``
    sampler_cfg : SamplerConfig
        Temperature/top-p transform applied before sampling
    rng : np.random.Generator
        Caller-owned random source
    eos_fill : bool
        Reveal everything right of a committed EOS as EOS without a step
    prompt : mapping, optional
        Positions revealed before the first step

    Returns:
    --------
    (sequence, DecodeTrace)
    """
    prompt = dict(prompt or {})
    state = MaskState.from_revealed(model.length, prompt)
    trace = DecodeTrace(model.prompt_id, selector.name, prompt=prompt)
    history = MarginalHistory(selector.history_len)
    # One uniform per position; a position's token depends only on its own draw.
    uniforms = rng.random(model.length)
    filled_total: list[int] = []

    while not state.is_complete:
        try:
            marginals = all_marginals(model, state)
        except ZeroProbabilityContext as e:
            e.trace = trace
            raise
        choice = selector.select(StepContext(model, state, marginals, history))
        positions = checked_positions(choice, state)
        sampled = {}
        for position in positions:
            probs = transform_distribution(marginals[state.index(position)], sampler_cfg)
            sampled[position] = sample_from_uniform(probs, uniforms[position])
        history = history.pushed(state, marginals)
        next_state, filled = commit(state, sampled, model.vocab, eos_fill)
        trace.steps.append(
            DecodeStep(
                trace.step_count, state, positions, choice.per_pick_delta, sampled, filled
            )
        )
        filled_total.extend(filled)
        state = next_state

    trace.eos_filled = tuple(sorted(filled_total))
    logger.debug(
        "Decoded %s in %d steps with %s", model.prompt_id, trace.step_count, selector.name
    )
    return state.sequence(), trace
