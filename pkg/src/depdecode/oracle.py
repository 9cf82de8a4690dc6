"""Exactly computable sequence models standing in for a diffusion backbone.

A :class:`TabularModel` holds the joint distribution over all length-N token
sequences, either as a dense float64 table with one axis per position or as a
structured source (independent product, Markov chain, copy, arithmetic
constraint) that gives any entry on demand. Every query is answered by exact
summation over the table of the masked positions, which makes this module the
correctness oracle for the rest of the package.
"""

import json
import logging
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from functools import cached_property, reduce
from pathlib import Path
from typing import Literal, Protocol

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from scipy.stats import entropy

from depdecode.errors import (
    ConfigError,
    DimensionMismatch,
    EnumerationCapExceeded,
    ZeroProbabilityContext,
)
from depdecode.sampling import SamplerConfig, transform_sample

logger = logging.getLogger(__name__)

DEFAULT_ENUMERATION_CAP = 10**7

TaskKind = Literal[
    "independent", "markov", "copy", "arithmetic-mod", "dense-random", "eos-markov"
]
TASK_KINDS: tuple[str, ...] = TaskKind.__args__  # type: ignore[attr-defined]


@dataclass(frozen=True)
class VocabSpec:
    size: int
    eos_id: int

    def __post_init__(self):
        if self.size < 2:
            raise ValueError(f"Vocabulary needs at least 2 tokens, got {self.size}")
        if not 0 <= self.eos_id < self.size:
            raise ValueError(f"eos_id {self.eos_id} outside vocabulary [0, {self.size})")

    @classmethod
    def with_size(cls, size: int) -> "VocabSpec":
        """Vocabulary whose last token is EOS."""
        return cls(size=size, eos_id=size - 1)


@dataclass(frozen=True)
class MaskState:
    """Revealed positions with their tokens, and the ascending masked positions."""

    length: int
    revealed: Mapping[int, int] = field(default_factory=dict)
    masked: tuple[int, ...] = ()

    def __post_init__(self):
        revealed = {int(p): int(v) for p, v in sorted(self.revealed.items())}
        masked = tuple(int(p) for p in self.masked)
        object.__setattr__(self, "revealed", revealed)
        object.__setattr__(self, "masked", masked)

        if list(masked) != sorted(set(masked)):
            raise ValueError(f"Masked positions must be strictly ascending: {masked}")
        if set(revealed) & set(masked):
            raise ValueError("A position cannot be both revealed and masked")
        if set(revealed) | set(masked) != set(range(self.length)):
            raise ValueError(
                f"Revealed and masked positions must partition 0..{self.length - 1}"
            )
        if any(v < 0 for v in revealed.values()):
            raise ValueError("Token values must be non-negative")

    @classmethod
    def fully_masked(cls, length: int) -> "MaskState":
        return cls(length=length, revealed={}, masked=tuple(range(length)))

    @classmethod
    def from_revealed(cls, length: int, revealed: Mapping[int, int]) -> "MaskState":
        masked = tuple(p for p in range(length) if p not in revealed)
        return cls(length=length, revealed=dict(revealed), masked=masked)

    def index(self, position: int) -> int:
        """Rank of a masked position in the masked ordering."""
        try:
            return self.masked.index(position)
        except ValueError:
            raise ValueError(f"Position {position} is not masked") from None

    def reveal(self, values: Mapping[int, int]) -> "MaskState":
        for position in values:
            if position not in self.masked:
                raise ValueError(f"Position {position} is not masked")
        return MaskState.from_revealed(self.length, {**self.revealed, **values})

    @property
    def is_complete(self) -> bool:
        return not self.masked

    def sequence(self) -> tuple[int, ...]:
        if not self.is_complete:
            raise ValueError("Sequence still has masked positions")
        return tuple(self.revealed[p] for p in range(self.length))


class JointSource(Protocol):
    """A joint over ``V^N`` sequences that answers queries without a dense table."""

    def mass(self, sequence: Sequence[int]) -> float: ...

    def conditioned(
        self, revealed: Mapping[int, int], masked: tuple[int, ...]
    ) -> np.ndarray:
        """Unnormalized table over ``masked`` (ascending axes) at the revealed values."""
        ...

    def sample(self, rng: np.random.Generator) -> tuple[int, ...]: ...


def _check_rows(rows: np.ndarray, what: str):
    if np.any(rows < 0) or np.any(np.abs(rows.sum(axis=-1) - 1.0) > 1e-12):
        raise ValueError(f"{what} must hold probability vectors")


@dataclass(frozen=True, eq=False)
class DenseJoint:
    table: np.ndarray

    def __post_init__(self):
        table = np.asarray(self.table, dtype=np.float64)
        if np.any(table < 0):
            raise ValueError("Joint mass must be non-negative")
        total = table.sum()
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"Joint mass sums to {total!r}, expected 1")
        table.setflags(write=False)
        object.__setattr__(self, "table", table)

    def mass(self, sequence):
        return float(self.table[tuple(sequence)])

    def conditioned(self, revealed, masked):
        index = tuple(
            revealed[p] if p in revealed else slice(None) for p in range(self.table.ndim)
        )
        return np.asarray(self.table[index])

    def sample(self, rng):
        flat = self.table.ravel()
        index = rng.choice(flat.size, p=flat)
        return tuple(int(v) for v in np.unravel_index(index, self.table.shape))


@dataclass(frozen=True, eq=False)
class ProductJoint:
    """Independent positions; ``factors[i]`` is the distribution of position i."""

    factors: np.ndarray

    def __post_init__(self):
        factors = np.asarray(self.factors, dtype=np.float64)
        _check_rows(factors, "Factors")
        object.__setattr__(self, "factors", factors)

    def mass(self, sequence):
        return float(np.prod([self.factors[i, v] for i, v in enumerate(sequence)]))

    def conditioned(self, revealed, masked):
        scale = float(np.prod([self.factors[p, v] for p, v in revealed.items()]))
        if not masked:
            return np.asarray(scale)
        return scale * reduce(np.multiply.outer, [self.factors[p] for p in masked])

    def sample(self, rng):
        size = self.factors.shape[1]
        return tuple(int(rng.choice(size, p=row)) for row in self.factors)


@dataclass(frozen=True, eq=False)
class MarkovJoint:
    """First-order chain: ``initial`` over position 0, then ``transition[prev]``."""

    initial: np.ndarray
    transition: np.ndarray
    length: int

    def __post_init__(self):
        initial = np.asarray(self.initial, dtype=np.float64)
        transition = np.asarray(self.transition, dtype=np.float64)
        _check_rows(initial, "Initial distribution")
        _check_rows(transition, "Transition rows")
        object.__setattr__(self, "initial", initial)
        object.__setattr__(self, "transition", transition)

    def mass(self, sequence):
        value = self.initial[sequence[0]]
        for prev, cur in zip(sequence, sequence[1:]):
            value *= self.transition[prev, cur]
        return float(value)

    def conditioned(self, revealed, masked):
        # Axes: masked positions already passed, then the current position.
        table = self.initial
        for position in range(self.length):
            last = position == self.length - 1
            if position in revealed:
                table = table[..., revealed[position]]
                if not last:
                    table = table[..., None] * self.transition[revealed[position]]
            elif not last:
                table = table[..., None] * self.transition
        return np.asarray(table)

    def sample(self, rng):
        size = len(self.initial)
        sequence = [int(rng.choice(size, p=self.initial))]
        for _ in range(self.length - 1):
            sequence.append(int(rng.choice(size, p=self.transition[sequence[-1]])))
        return tuple(sequence)


@dataclass(frozen=True)
class CopyJoint:
    """Position 0 uniform; every later position copies its predecessor."""

    size: int
    length: int

    def mass(self, sequence):
        return 1.0 / self.size if len(set(sequence)) == 1 else 0.0

    def conditioned(self, revealed, masked):
        table = np.zeros((self.size,) * len(masked))
        values = set(revealed.values())
        if len(values) > 1:
            return table
        tokens = values or set(range(self.size))
        for token in tokens:
            table[(token,) * len(masked)] = 1.0 / self.size
        return table

    def sample(self, rng):
        return (int(rng.integers(self.size)),) * self.length


@dataclass(frozen=True)
class ArithmeticJoint:
    """Leading positions uniform; the last is their sum modulo the vocabulary size."""

    size: int
    length: int

    @property
    def _point_mass(self) -> float:
        return float(self.size) ** -(self.length - 1)

    def mass(self, sequence):
        valid = sum(sequence[:-1]) % self.size == sequence[-1]
        return self._point_mass if valid else 0.0

    def conditioned(self, revealed, masked):
        grid = np.indices((self.size,) * len(masked))
        axes = {p: grid[k] for k, p in enumerate(masked)}
        values = [axes[p] if p in axes else revealed[p] for p in range(self.length)]
        leading = sum(values[:-1], np.zeros((self.size,) * len(masked), dtype=int))
        valid = leading % self.size == values[-1]
        return np.where(valid, self._point_mass, 0.0)

    def sample(self, rng):
        leading = [int(v) for v in rng.integers(self.size, size=self.length - 1)]
        return (*leading, sum(leading) % self.size)


@dataclass(frozen=True, eq=False)
class TabularModel:
    """
    Exact joint over length-N sequences.

    ``source`` is either a dense table with one axis per position or a
    structured joint (product, Markov chain, copy, arithmetic constraint).
    Queries only materialize the table over the masked positions; the full
    table behind ``joint`` is built on demand and subject to ``cap``.
    """

    vocab: VocabSpec
    length: int
    source: JointSource | np.ndarray
    prompt_id: str = "dense"
    kind: str = "dense-random"
    seed: int = 0
    concentration: float = 1.0
    cap: int = DEFAULT_ENUMERATION_CAP

    def __post_init__(self):
        if isinstance(self.source, np.ndarray):
            expected = (self.vocab.size,) * self.length
            if self.source.shape != expected:
                raise DimensionMismatch(
                    f"Joint has shape {self.source.shape}, expected {expected}"
                )
            object.__setattr__(self, "source", DenseJoint(self.source))

    @cached_property
    def joint(self) -> np.ndarray:
        """The full dense table, read-only."""
        if isinstance(self.source, DenseJoint):
            return self.source.table
        _check_cap(self.vocab.size**self.length, self.cap, f"Dense {self.kind} joint")
        everything = tuple(range(self.length))
        table = np.array(self.source.conditioned({}, everything), dtype=np.float64)
        table.setflags(write=False)
        return table

    def mass(self, sequence: Sequence[int]) -> float:
        if len(sequence) != self.length:
            raise DimensionMismatch(f"Sequence has length {len(sequence)}, expected {self.length}")
        return self.source.mass(tuple(int(v) for v in sequence))

    def info(self):
        return {
            "prompt_id": self.prompt_id,
            "kind": self.kind,
            "vocab_size": self.vocab.size,
            "eos_id": self.vocab.eos_id,
            "length": self.length,
            "seed": self.seed,
        }


def _check_cap(n_entries: int, cap: int, what: str):
    if n_entries > cap:
        raise EnumerationCapExceeded(
            f"{what} needs {n_entries} entries, above the enumeration cap {cap}"
        )


def conditioned_table(model: TabularModel, state: MaskState) -> np.ndarray:
    """Joint over the masked positions given the revealed ones, normalized."""
    if state.length != model.length:
        raise DimensionMismatch(
            f"State length {state.length} does not match model length {model.length}"
        )
    for position, token in state.revealed.items():
        if token >= model.vocab.size:
            raise ValueError(f"Token {token} at position {position} out of vocab")
    _check_cap(model.vocab.size ** len(state.masked), model.cap, "Conditioned table")
    table = np.asarray(model.source.conditioned(state.revealed, state.masked))
    total = table.sum()
    if total <= 0:
        raise ZeroProbabilityContext(
            f"Revealed context {state.revealed} has zero mass under {model.prompt_id}"
        )
    return table / total


def conditional_marginal(
    model: TabularModel, state: MaskState, target: int
) -> np.ndarray:
    """P(Y_target | revealed context), summing out every other masked position."""
    table = conditioned_table(model, state)
    axis = state.index(target)
    others = tuple(a for a in range(table.ndim) if a != axis)
    return table.sum(axis=others)


def all_marginals(model: TabularModel, state: MaskState) -> np.ndarray:
    """Marginals of every masked position, shape (|M|, V). One forward pass."""
    table = conditioned_table(model, state)
    rows = []
    for axis in range(table.ndim):
        others = tuple(a for a in range(table.ndim) if a != axis)
        rows.append(table.sum(axis=others))
    if not rows:
        return np.zeros((0, model.vocab.size))
    return np.stack(rows)


def joint_conditional(
    model: TabularModel,
    state: MaskState,
    subset: Sequence[int],
    cap: int = DEFAULT_ENUMERATION_CAP,
) -> np.ndarray:
    """
    Exact joint of ``subset`` given the revealed context.

    The result has one axis per subset position, in the order given.
    """
    subset = list(subset)
    if len(set(subset)) != len(subset):
        raise ValueError(f"Subset has duplicate positions: {subset}")
    _check_cap(model.vocab.size ** len(subset), cap, "Subset joint")
    table = conditioned_table(model, state)
    axes = [state.index(p) for p in subset]
    others = tuple(a for a in range(table.ndim) if a not in axes)
    reduced = table.sum(axis=others) if others else table
    ascending = sorted(axes)
    return np.transpose(reduced, [ascending.index(a) for a in axes])


def make_task_model(
    kind: str,
    vocab: VocabSpec,
    length: int,
    seed: int,
    concentration: float = 1.0,
    cap: int = DEFAULT_ENUMERATION_CAP,
    prompt_id: str | None = None,
) -> TabularModel:
    """
    Build a synthetic task model; identical arguments give identical tables.

    Parameters:
    -----------
    kind : str
        One of ``TASK_KINDS``:
        - independent: product of Dirichlet-drawn per-position factors
        - markov: first-order chain with Dirichlet initial and transition rows
        - eos-markov: markov with an absorbing EOS row (early-EOS mass)
        - copy: Y_0 uniform, every later position copies its predecessor
        - arithmetic-mod: leading positions uniform, last = their sum mod V
        - dense-random: whole joint drawn from a symmetric Dirichlet
    vocab : VocabSpec
    length : int
        Response length N
    seed : int
        Seed for the random families; ignored by copy and arithmetic-mod
    concentration : float
        Dirichlet concentration for the random families
    cap : int
        Largest table materialized, in entries. dense-random checks it at
        build time; the structured families check it per query, on the table
        over the masked positions
    """
    if length < 1:
        raise ValueError("Length must be positive")
    if kind not in TASK_KINDS:
        raise ValueError(f"Unknown task kind {kind!r}; expected one of {TASK_KINDS}")
    size = vocab.size
    rng = np.random.default_rng(seed)
    alpha = np.full(size, concentration)

    source: JointSource | np.ndarray
    if kind == "independent":
        source = ProductJoint(rng.dirichlet(alpha, size=length))
    elif kind in ("markov", "eos-markov"):
        initial = rng.dirichlet(alpha)
        transition = rng.dirichlet(alpha, size=size)
        if kind == "eos-markov":
            transition[vocab.eos_id] = np.eye(size)[vocab.eos_id]
        source = MarkovJoint(initial, transition, length)
    elif kind == "copy":
        source = CopyJoint(size, length)
    elif kind == "arithmetic-mod":
        if length < 2:
            raise ValueError("arithmetic-mod needs at least 2 positions")
        source = ArithmeticJoint(size, length)
    else:
        _check_cap(size**length, cap, f"Dense {kind} model")
        joint = rng.dirichlet(np.full(size**length, concentration))
        source = (joint / joint.sum()).reshape((size,) * length)

    model = TabularModel(
        vocab=vocab,
        length=length,
        source=source,
        prompt_id=prompt_id or f"{kind}-v{size}-n{length}-s{seed}",
        kind=kind,
        seed=seed,
        concentration=concentration,
        cap=cap,
    )
    logger.debug("Built model %s", model.info())
    return model


def sample_joint(model: TabularModel, rng: np.random.Generator) -> tuple[int, ...]:
    """Draw one complete sequence from the model joint."""
    return model.source.sample(rng)


def in_support(model: TabularModel, sequence: Sequence[int]) -> bool:
    return model.mass(sequence) > 0


OrderPolicy = Callable[[MaskState, np.ndarray], int]


def _left_to_right(state: MaskState, marginals: np.ndarray) -> int:
    return state.masked[0]


def _right_to_left(state: MaskState, marginals: np.ndarray) -> int:
    return state.masked[-1]


def _min_entropy(state: MaskState, marginals: np.ndarray) -> int:
    return state.masked[int(np.argmin(entropy(marginals, axis=1)))]


def _max_confidence(state: MaskState, marginals: np.ndarray) -> int:
    return state.masked[int(np.argmax(marginals.max(axis=1)))]


ORDER_POLICIES: dict[str, OrderPolicy] = {
    "left-to-right": _left_to_right,
    "right-to-left": _right_to_left,
    "min-entropy": _min_entropy,
    "max-confidence": _max_confidence,
}


def sample_sequential(
    model: TabularModel,
    state: MaskState,
    order_policy: str | OrderPolicy,
    sampler_cfg: SamplerConfig,
    rng: np.random.Generator,
) -> tuple[int, ...]:
    """Fill the masked positions one at a time from their exact conditionals."""
    policy = ORDER_POLICIES[order_policy] if isinstance(order_policy, str) else order_policy
    while not state.is_complete:
        marginals = all_marginals(model, state)
        position = policy(state, marginals)
        token = transform_sample(marginals[state.index(position)], sampler_cfg, rng)
        state = state.reveal({position: token})
    return state.sequence()


class ModelDescription(BaseModel):
    """Key-value description that rebuilds a task model bit-exactly."""

    model_config = ConfigDict(extra="forbid")

    kind: TaskKind
    vocab_size: int = Field(..., ge=2)
    eos_id: int | None = Field(None, ge=0)
    length: int = Field(..., ge=1)
    seed: int = Field(0, ge=0)
    concentration: float = Field(1.0, gt=0)
    prompt_id: str | None = None

    @model_validator(mode="after")
    def _eos_in_vocab(self):
        if self.eos_id is not None and self.eos_id >= self.vocab_size:
            raise ValueError("eos_id must be smaller than vocab_size")
        return self

    @property
    def vocab(self) -> VocabSpec:
        if self.eos_id is None:
            return VocabSpec.with_size(self.vocab_size)
        return VocabSpec(self.vocab_size, self.eos_id)

    def build(self, cap: int = DEFAULT_ENUMERATION_CAP) -> TabularModel:
        return make_task_model(
            self.kind,
            self.vocab,
            self.length,
            self.seed,
            concentration=self.concentration,
            cap=cap,
            prompt_id=self.prompt_id,
        )

    @classmethod
    def from_model(cls, model: TabularModel) -> "ModelDescription":
        return cls(
            kind=model.kind,
            vocab_size=model.vocab.size,
            eos_id=model.vocab.eos_id,
            length=model.length,
            seed=model.seed,
            concentration=model.concentration,
            prompt_id=model.prompt_id,
        )


def save_model_descriptions(descriptions: Sequence[ModelDescription], path):
    payload = [d.model_dump() for d in descriptions]
    with open(path, "w") as f:
        json.dump(payload if len(payload) != 1 else payload[0], f, indent=2)


def load_model_descriptions(path) -> list[ModelDescription]:
    """Read a description file holding either one model or a list of models."""
    with open(Path(path)) as f:
        payload = json.load(f)
    if isinstance(payload, dict):
        payload = [payload]
    try:
        return [ModelDescription.model_validate(item) for item in payload]
    except ValidationError as e:
        raise ConfigError(f"{path}: {e}") from None


def load_models(path, cap: int = DEFAULT_ENUMERATION_CAP) -> list[TabularModel]:
    return [d.build(cap=cap) for d in load_model_descriptions(path)]
