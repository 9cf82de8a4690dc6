"""Brute-force checks of the dependency bound and its assumptions.

Everything here is exact enumeration over tabular models: the factorization
error of a co-sampled subset, the per-prefix sub-additivity condition the
bound rests on, the full output distribution a decoding policy induces, and
the sub-additivity slack protocol.
"""

import itertools
import json
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from functools import reduce

import numpy as np
import pandas as pd
from tqdm import tqdm

from depdecode.decoding import (
    DependencyFn,
    MarginalHistory,
    Selector,
    StepContext,
    checked_positions,
    commit,
)
from depdecode.errors import ConfigError, EnumerationCapExceeded
from depdecode.oracle import (
    DEFAULT_ENUMERATION_CAP,
    TASK_KINDS,
    MaskState,
    TabularModel,
    VocabSpec,
    all_marginals,
    joint_conditional,
    make_task_model,
    sample_joint,
)
from depdecode.sampling import IDENTITY_SAMPLER, SamplerConfig, transform_distribution
from depdecode.selection import TAU_GRID, SelectionConfig, greedy_subset_select
from depdecode.tv import (
    DependencySource,
    dependency_matrix_exact,
    subadditivity_slack,
    tv_distance,
)
from depdecode.utils import spawn_rng

logger = logging.getLogger(__name__)

BOUND_TOLERANCE = 1e-9
SLACK_TOLERANCE = 1e-12
SLACK_QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)
BOUND_GAMMAS = (0.0, 0.5, 0.9)


def tv_joint_vs_factorized(
    model: TabularModel,
    state: MaskState,
    subset: Sequence[int],
    cap: int = DEFAULT_ENUMERATION_CAP,
) -> float:
    """TV between the exact joint of ``subset`` and the product of its marginals."""
    subset = list(subset)
    joint = joint_conditional(model, state, subset, cap=cap)
    if len(subset) == 1:
        return 0.0
    marginals = [
        joint.sum(axis=tuple(a for a in range(joint.ndim) if a != axis))
        for axis in range(joint.ndim)
    ]
    factorized = reduce(np.multiply.outer, marginals)
    return tv_distance(joint.ravel(), factorized.ravel())


def _prefix_assumption(
    model: TabularModel,
    state: MaskState,
    order: Sequence[int],
    dep_exact,
    cap: int,
) -> tuple[bool, ...]:
    """
    Sub-additivity on each prefix of a pick order, by exact expectation.

    For pick ``t`` the expected TV shift of its conditional under the history
    ``s_1..s_{t-1}`` must not exceed the summed pairwise dependencies on that
    history.
    """
    flags = []
    for t in range(1, len(order)):
        prefix = list(order[: t + 1])
        joint = joint_conditional(model, state, prefix, cap=cap)
        target = joint.sum(axis=tuple(range(t)))
        history = joint.sum(axis=-1)
        support = history > 0
        conditionals = joint[support] / history[support][:, None]
        shifts = 0.5 * np.abs(conditionals - target).sum(axis=1)
        lhs = float(np.dot(history[support], shifts))
        rhs = sum(dep_exact.at(order[t], s) for s in order[:t])
        flags.append(lhs <= rhs + SLACK_TOLERANCE)
    return tuple(flags)


@dataclass(frozen=True)
class BoundReport:
    instance_id: int
    model_id: str
    tau: float
    gamma: float
    selected: tuple[int, ...]
    accumulated: float
    measured_tv: float
    dep_source: DependencySource
    # One flag per prefix of length >= 2, in pick order.
    assumption_holds: tuple[bool, ...] = ()

    @property
    def bound_satisfied(self) -> bool:
        return self.measured_tv <= self.tau + BOUND_TOLERANCE

    @property
    def gap(self) -> float:
        return self.measured_tv - self.tau

    @property
    def assumption_satisfied(self) -> bool:
        return all(self.assumption_holds)

    @property
    def is_counterexample(self) -> bool:
        # Predicted dependencies carry no guarantee; their gap is only reported.
        exact = self.dep_source == "exact"
        return exact and self.assumption_satisfied and not self.bound_satisfied

    def to_dict(self) -> dict:
        record = asdict(self)
        record.update(
            selected=list(self.selected),
            assumption_holds=list(self.assumption_holds),
            bound_satisfied=self.bound_satisfied,
            gap=self.gap,
        )
        return record


def verify_bound(
    model: TabularModel,
    state: MaskState,
    cfg: SelectionConfig,
    dep_source: DependencySource = "exact",
    predictor: DependencyFn | None = None,
    instance_id: int = 0,
    cap: int = DEFAULT_ENUMERATION_CAP,
) -> BoundReport:
    """
    Run greedy selection and measure the factorization error of its subset.

    The bound is checked against ``cfg.tau``; the sub-additivity assumption is
    always evaluated with exact dependencies, whichever source drove the
    selection. Under predicted dependencies the gap is reported, not judged.
    """
    exact = dependency_matrix_exact(model, state)
    if dep_source == "exact":
        dep = exact
    elif predictor is None:
        raise ConfigError("Predicted dependency source needs a predictor")
    else:
        dep = predictor(model, state)
    top1 = all_marginals(model, state).max(axis=1)
    result = greedy_subset_select(dep, state.masked, top1, cfg)
    measured = tv_joint_vs_factorized(model, state, result.chosen, cap=cap)
    report = BoundReport(
        instance_id=instance_id,
        model_id=model.prompt_id,
        tau=cfg.tau,
        gamma=cfg.gamma,
        selected=result.chosen,
        accumulated=result.accumulated,
        measured_tv=measured,
        dep_source=dep_source,
        assumption_holds=_prefix_assumption(model, state, result.chosen, exact, cap),
    )
    if report.is_counterexample:
        logger.warning("Bound violated on instance %d: %s", instance_id, report)
    return report


def random_instance(
    instance_id: int,
    seed: int = 0,
    kinds: Sequence[str] = TASK_KINDS,
    vocab_sizes: Sequence[int] = (2, 3, 4),
    lengths: Sequence[int] = (2, 3, 4, 5, 6),
) -> tuple[TabularModel, MaskState]:
    """A seeded model and a reachable mask state drawn from one of its samples."""
    rng = spawn_rng(seed, instance_id)
    kind = str(rng.choice(list(kinds)))
    size = int(rng.choice(list(vocab_sizes)))
    length = int(rng.choice(list(lengths)))
    model = make_task_model(
        kind,
        VocabSpec.with_size(size),
        length,
        seed=int(rng.integers(2**31)),
        concentration=float(rng.choice([0.3, 1.0])),
    )
    response = sample_joint(model, rng)
    n_mask = max(1, math.ceil(rng.random() * length))
    masked = sorted(int(p) for p in rng.choice(length, n_mask, replace=False))
    revealed = {p: response[p] for p in range(length) if p not in masked}
    return model, MaskState(length, revealed, tuple(masked))


@dataclass
class SuiteReport:
    reports: list[BoundReport] = field(default_factory=list)

    @property
    def n_instances(self) -> int:
        return len(self.reports)

    @property
    def n_assumption_holds(self) -> int:
        return sum(r.assumption_satisfied for r in self.reports)

    @property
    def counterexamples(self) -> list[BoundReport]:
        return [r for r in self.reports if r.is_counterexample]

    @property
    def max_gap(self) -> float:
        return max((r.gap for r in self.reports), default=-math.inf)


def run_bound_suite(
    n_instances: int = 1000,
    seed: int = 0,
    taus: Sequence[float] = TAU_GRID,
    gammas: Sequence[float] = BOUND_GAMMAS,
    kinds: Sequence[str] = TASK_KINDS,
    dep_source: DependencySource = "exact",
    predictor: DependencyFn | None = None,
    vocab_sizes: Sequence[int] = (2, 3, 4),
    lengths: Sequence[int] = (2, 3, 4, 5, 6),
    progress: bool = False,
) -> SuiteReport:
    """
    Check the bound over seeded random instances.

    Each instance draws its (tau, gamma) from the given grids. A predictor
    only fits one (V, N) layout, so predicted runs pin ``vocab_sizes`` and
    ``lengths`` to it.
    """
    if not taus or not gammas:
        raise ConfigError("Bound suite needs at least one tau and one gamma")
    suite = SuiteReport()
    for i in tqdm(range(n_instances), disable=not progress, desc="bound"):
        model, state = random_instance(i, seed, kinds, vocab_sizes, lengths)
        rng = spawn_rng(seed, i, 1)
        cfg = SelectionConfig(tau=float(rng.choice(taus)), gamma=float(rng.choice(gammas)))
        suite.reports.append(
            verify_bound(model, state, cfg, dep_source, predictor, instance_id=i)
        )
    logger.info(
        "Bound suite: %d instances, %d with assumption, %d counterexamples",
        suite.n_instances,
        suite.n_assumption_holds,
        len(suite.counterexamples),
    )
    return suite


def write_bound_reports(reports: Sequence[BoundReport], path):
    with open(path, "w") as f:
        for report in reports:
            f.write(json.dumps(report.to_dict()) + "\n")


def conditioned_joint(model: TabularModel, prompt: Mapping[int, int] | None = None):
    """The model joint restricted to sequences agreeing with ``prompt``, renormalized."""
    mask = np.ones(model.joint.shape, dtype=bool)
    for position, token in (prompt or {}).items():
        index: list = [slice(None)] * model.length
        index[position] = [v for v in range(model.vocab.size) if v != token]
        mask[tuple(index)] = False
    table = np.where(mask, model.joint, 0.0)
    return table / table.sum()


def induced_output_distribution(
    model: TabularModel,
    selector: Selector,
    sampler_cfg: SamplerConfig = IDENTITY_SAMPLER,
    prompt: Mapping[int, int] | None = None,
    eos_fill: bool = False,
    cap: int = DEFAULT_ENUMERATION_CAP,
) -> np.ndarray:
    """
    Exact distribution over final sequences produced by a decoding policy.

    Every sampling branch of the decode loop is expanded with its probability;
    the result has the shape of ``model.joint``. Branches that co-sample into a
    zero-mass context raise ``ZeroProbabilityContext`` as ``decode`` would.
    """
    if model.vocab.size**model.length > cap:
        raise EnumerationCapExceeded("Output space exceeds the enumeration cap")
    out = np.zeros((model.vocab.size,) * model.length)
    start = MaskState.from_revealed(model.length, dict(prompt or {}))

    def expand(state: MaskState, history: MarginalHistory, weight: float):
        if state.is_complete:
            out[state.sequence()] += weight
            return
        marginals = all_marginals(model, state)
        choice = selector.select(StepContext(model, state, marginals, history))
        positions = checked_positions(choice, state)
        dists = [
            transform_distribution(marginals[state.index(p)], sampler_cfg)
            for p in positions
        ]
        supports = [np.flatnonzero(d > 0) for d in dists]
        pushed = history.pushed(state, marginals)
        for tokens in itertools.product(*supports):
            p = math.prod(float(d[v]) for d, v in zip(dists, tokens, strict=True))
            sampled = dict(zip(positions, (int(v) for v in tokens), strict=True))
            next_state, _ = commit(state, sampled, model.vocab, eos_fill)
            expand(next_state, pushed, weight * p)

    expand(start, MarginalHistory(selector.history_len), 1.0)
    return out


@dataclass(frozen=True)
class SlackRecord:
    instance_id: int
    model_id: str
    kind: str
    subset_size: int
    target: int
    lhs: float
    rhs: float

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs


@dataclass
class SlackReport:
    records: list[SlackRecord] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        columns = ["instance_id", "model_id", "kind", "subset_size", "target", "lhs", "rhs"]
        frame = pd.DataFrame([asdict(r) for r in self.records], columns=columns)
        frame["slack"] = frame["rhs"] - frame["lhs"]
        return frame

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "SlackReport":
        fields = ["instance_id", "model_id", "kind", "subset_size", "target", "lhs", "rhs"]
        rows = frame[fields].to_dict(orient="records")
        return cls([SlackRecord(**row) for row in rows])

    def by_size(self) -> pd.DataFrame:
        """Per-|S| count, mean slack, violation rate and slack quantiles."""
        frame = self.to_frame()
        names = [f"q{int(round(q * 100)):02d}" for q in SLACK_QUANTILES]
        columns = ["subset_size", "count", "mean_slack", "violation_rate", *names]
        if frame.empty:
            return pd.DataFrame(columns=columns)
        grouped = frame.groupby("subset_size")["slack"]
        table = pd.DataFrame(
            {
                "count": grouped.size(),
                "mean_slack": grouped.mean(),
                "violation_rate": grouped.apply(lambda s: float((s < -SLACK_TOLERANCE).mean())),
            }
        )
        quantiles = grouped.quantile(list(SLACK_QUANTILES)).unstack()
        quantiles.columns = names
        return table.join(quantiles).reset_index()[columns]

    @property
    def violation_rate(self) -> float:
        if not self.records:
            return 0.0
        return sum(r.slack < -SLACK_TOLERANCE for r in self.records) / len(self.records)


def run_slack_experiment(
    models: Sequence[TabularModel],
    n_instances: int,
    max_subset_size: int = 6,
    seed: int = 0,
    progress: bool = False,
) -> SlackReport:
    """
    Sample sub-additivity slack records on random masks and subsets.

    Instance ``i`` uses model ``i mod len(models)``: a response drawn from the
    joint, a mask of ``ceil(t * N)`` positions with ``t ~ U(0, 1)`` (raised to
    ``|S| + 1`` when smaller), a subset size ``|S| ~ U{1..max_subset_size}``
    capped at ``N - 1``, and a realization of the subset drawn from its exact
    joint conditional. Every other masked position is a target.
    """
    if not models:
        raise ConfigError("Slack experiment needs at least one model")
    report = SlackReport()
    for i in tqdm(range(n_instances), disable=not progress, desc="slack"):
        model = models[i % len(models)]
        length = model.length
        if length < 2:
            continue
        rng = spawn_rng(seed, i)
        size = int(rng.integers(1, min(max_subset_size, length - 1) + 1))
        response = sample_joint(model, rng)
        n_mask = max(math.ceil(rng.random() * length), size + 1)
        masked = sorted(int(p) for p in rng.choice(length, n_mask, replace=False))
        state = MaskState(
            length, {p: response[p] for p in range(length) if p not in masked}, tuple(masked)
        )
        subset = sorted(int(p) for p in rng.choice(masked, size, replace=False))
        joint = joint_conditional(model, state, subset)
        flat = rng.choice(joint.size, p=joint.ravel())
        realization = [int(v) for v in np.unravel_index(flat, joint.shape)]
        for target in masked:
            if target in subset:
                continue
            lhs, rhs = subadditivity_slack(model, state, target, subset, realization)
            report.records.append(
                SlackRecord(i, model.prompt_id, model.kind, size, target, lhs, rhs)
            )
    logger.info(
        "Slack experiment: %d records, violation rate %.4f",
        len(report.records),
        report.violation_rate,
    )
    return report
