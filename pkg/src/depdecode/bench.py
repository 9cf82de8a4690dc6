"""Benchmark runs, hyperparameter grids, and report files.

A run decodes ``repetitions`` sequences for each task seed and scores them by
support membership: a decoded sequence is correct when the model gives it
positive mass. Step counts are forward passes; speedup is relative to the
one-token entropy selector on the same task.
"""

import json
import logging
import math
import os
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from typing import Literal

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from tqdm import tqdm

from depdecode.decoding import (
    CONF_GRID,
    KL_GRID,
    SELECTOR_NAMES,
    DependencyFn,
    Selector,
    build_selector,
    decode,
)
from depdecode.errors import ConfigError, FormatVersionMismatch, ZeroProbabilityContext
from depdecode.oracle import (
    TaskKind,
    TabularModel,
    VocabSpec,
    in_support,
    make_task_model,
    sample_joint,
)
from depdecode.predictor import PredictedDependency, load_checkpoint
from depdecode.sampling import SamplerConfig
from depdecode.selection import GAMMA_GRID, TAU_GRID
from depdecode.utils import ensure_workspace, spawn_rng
from depdecode.verification import BOUND_TOLERANCE, SlackReport, tv_joint_vs_factorized

logger = logging.getLogger(__name__)

BENCH_FORMAT_VERSION = 1
BENCH_HEADER = f"# depdecode-bench v{BENCH_FORMAT_VERSION}"

SelectorName = Literal["demask", "entropy", "top1", "token-order", "klass"]


class ExperimentConfig(BaseModel):
    """Flat experiment description; every key doubles as a CLI override."""

    model_config = ConfigDict(extra="forbid")

    # task
    kind: TaskKind = "arithmetic-mod"
    vocab_size: int = Field(3, ge=2)
    length: int = Field(3, ge=1)
    eos_id: int | None = Field(None, ge=0)
    concentration: float = Field(1.0, gt=0)
    prompt_length: int = Field(0, ge=0)
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)

    # selector
    selector: SelectorName = "demask"
    tau: float = Field(0.04, ge=0)
    gamma: float = Field(0.9, ge=0, le=1)
    tokens_per_step: int = Field(1, ge=1)
    kl_threshold: float = Field(0.0003, ge=0)
    conf_threshold: float = Field(0.9, ge=0, le=1)
    history: int = Field(2, ge=1)
    dependency: Literal["exact", "predicted"] = "exact"
    checkpoint: str | None = None

    # sampler
    temperature: float = Field(0.1, gt=0)
    top_p: float = Field(0.9, gt=0, le=1)

    # run
    eos_fill: bool = False
    repetitions: int = Field(100, ge=1)
    seed: int = Field(0, ge=0)
    workers: int = Field(1, ge=1)
    verify: bool = False
    out: str = "results"

    @model_validator(mode="after")
    def _consistent(self):
        if self.prompt_length >= self.length:
            raise ValueError("prompt_length must leave at least one position to decode")
        if self.eos_id is not None and self.eos_id >= self.vocab_size:
            raise ValueError("eos_id must be smaller than vocab_size")
        if self.dependency == "predicted" and not self.checkpoint:
            raise ValueError("dependency 'predicted' needs a checkpoint path")
        return self

    @property
    def vocab(self) -> VocabSpec:
        if self.eos_id is None:
            return VocabSpec.with_size(self.vocab_size)
        return VocabSpec(self.vocab_size, self.eos_id)

    @property
    def sampler(self) -> SamplerConfig:
        return SamplerConfig(self.temperature, self.top_p)

    def models(self) -> list[TabularModel]:
        return [
            make_task_model(self.kind, self.vocab, self.length, s, self.concentration)
            for s in self.seeds
        ]

    def build_selector(self) -> Selector:
        dependency: DependencyFn | None = None
        if self.selector == "demask" and self.dependency == "predicted":
            weights, feature_cfg = load_checkpoint(self.checkpoint)
            dependency = PredictedDependency(weights, feature_cfg)
        return build_selector(
            self.selector,
            k=self.tokens_per_step,
            tau=self.tau,
            gamma=self.gamma,
            kl_threshold=self.kl_threshold,
            conf_threshold=self.conf_threshold,
            history_len=self.history,
            dependency=dependency,
        )

    def baseline(self) -> "ExperimentConfig":
        return self.model_copy(
            update={"selector": "entropy", "tokens_per_step": 1, "verify": False}
        )


def _field_errors(error: ValidationError) -> str:
    return "; ".join(
        f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}"
        for e in error.errors()
    )


def load_experiment_config(path=None, **overrides) -> ExperimentConfig:
    """Read a JSON config and apply overrides; ``None`` overrides are ignored."""
    data: dict = {}
    if path is not None:
        with open(path) as f:
            data = json.load(f)
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_field_errors(e)) from None


@dataclass(frozen=True)
class BenchRecord:
    config_id: int
    kind: str
    selector: str
    tau: float
    gamma: float
    tokens_per_step: int
    kl_threshold: float
    conf_threshold: float
    temperature: float
    top_p: float
    eos_fill: bool
    runs: int
    accuracy: float
    mean_steps: float
    mean_tokens_per_step: float
    speedup: float
    zero_mass_rate: float
    # Fraction of steps over the bound; None unless verification ran.
    violation_rate: float | None = None

    @classmethod
    def from_row(cls, row) -> "BenchRecord":
        values = {}
        for f in fields(cls):
            value = row[f.name]
            if f.name == "violation_rate":
                values[f.name] = None if pd.isna(value) else float(value)
            elif f.type in (int, "int"):
                values[f.name] = int(value)
            elif f.type in (bool, "bool"):
                values[f.name] = bool(value)
            elif f.type in (str, "str"):
                values[f.name] = str(value)
            else:
                values[f.name] = float(value)
        return cls(**values)


BENCH_COLUMNS = [f.name for f in fields(BenchRecord)]


@dataclass(frozen=True)
class RunOutcome:
    correct: bool
    steps: int
    tokens_per_step: float
    zero_mass: bool
    checked_steps: int = 0
    violations: int = 0


def _run_once(
    cfg: ExperimentConfig,
    model: TabularModel,
    selector: Selector,
    rng,
) -> RunOutcome:
    prompt = {}
    if cfg.prompt_length:
        response = sample_joint(model, rng)
        prompt = {p: response[p] for p in range(cfg.prompt_length)}
    try:
        sequence, trace = decode(model, selector, cfg.sampler, rng, cfg.eos_fill, prompt)
    except ZeroProbabilityContext as e:
        steps = e.trace.steps
        settled = len(prompt) + sum(len(s.positions) + len(s.filled) for s in steps)
        remaining = model.length - settled
        return RunOutcome(False, len(steps) + remaining, e.trace.mean_tokens_per_step, True)

    checked = violations = 0
    if cfg.verify and cfg.selector == "demask":
        for step in trace.steps:
            measured = tv_joint_vs_factorized(model, step.state, step.positions)
            checked += 1
            violations += measured > cfg.tau + BOUND_TOLERANCE
    return RunOutcome(
        in_support(model, sequence),
        trace.step_count,
        trace.mean_tokens_per_step,
        False,
        checked,
        violations,
    )


def run_config(
    cfg: ExperimentConfig,
    config_id: int = 0,
    baseline_steps: float | None = None,
    progress: bool = False,
) -> BenchRecord:
    """
    Decode every (task seed, repetition) pair of one configuration.

    Run ``r`` on task seed index ``m`` draws from the generator keyed on
    ``(cfg.seed, config_id, m, r)``. ``baseline_steps`` is the one-token
    entropy selector's mean step count; it is computed when not given.
    """
    selector = cfg.build_selector()
    models = cfg.models()
    work = [(m, r) for m in range(len(models)) for r in range(cfg.repetitions)]
    outcomes = [
        _run_once(cfg, models[m], selector, spawn_rng(cfg.seed, config_id, m, r))
        for m, r in tqdm(work, disable=not progress, desc=f"config {config_id}")
    ]
    mean_steps = sum(o.steps for o in outcomes) / len(outcomes)
    if baseline_steps is None:
        baseline_steps = (
            mean_steps
            if cfg.selector == "entropy" and cfg.tokens_per_step == 1
            else run_config(cfg.baseline(), config_id).mean_steps
        )
    checked = sum(o.checked_steps for o in outcomes)
    record = BenchRecord(
        config_id=config_id,
        kind=cfg.kind,
        selector=cfg.selector,
        tau=cfg.tau,
        gamma=cfg.gamma,
        tokens_per_step=cfg.tokens_per_step,
        kl_threshold=cfg.kl_threshold,
        conf_threshold=cfg.conf_threshold,
        temperature=cfg.temperature,
        top_p=cfg.top_p,
        eos_fill=cfg.eos_fill,
        runs=len(outcomes),
        accuracy=sum(o.correct for o in outcomes) / len(outcomes),
        mean_steps=mean_steps,
        mean_tokens_per_step=sum(o.tokens_per_step for o in outcomes) / len(outcomes),
        speedup=baseline_steps / mean_steps,
        zero_mass_rate=sum(o.zero_mass for o in outcomes) / len(outcomes),
        violation_rate=(
            sum(o.violations for o in outcomes) / checked
            if cfg.verify and cfg.selector == "demask" and checked
            else None
        ),
    )
    logger.info(
        "config %d (%s): accuracy %.4f, mean steps %.3f",
        config_id,
        cfg.selector,
        record.accuracy,
        record.mean_steps,
    )
    return record


def run_benchmark(cfg: ExperimentConfig, progress: bool = False) -> list[BenchRecord]:
    return [run_config(cfg, 0, progress=progress)]


def demask_grid(
    base: ExperimentConfig,
    taus: Sequence[float] = TAU_GRID,
    gammas: Sequence[float] = GAMMA_GRID,
) -> list[ExperimentConfig]:
    return [
        base.model_copy(update={"selector": "demask", "tau": tau, "gamma": gamma})
        for tau in taus
        for gamma in gammas
    ]


def klass_grid(
    base: ExperimentConfig,
    kl_thresholds: Sequence[float] = KL_GRID,
    conf_thresholds: Sequence[float] = CONF_GRID,
) -> list[ExperimentConfig]:
    return [
        base.model_copy(
            update={"selector": "klass", "kl_threshold": kl, "conf_threshold": conf}
        )
        for kl in kl_thresholds
        for conf in conf_thresholds
    ]


def build_grid(base: ExperimentConfig, selector: str) -> list[ExperimentConfig]:
    if selector == "demask":
        return demask_grid(base)
    if selector == "klass":
        return klass_grid(base)
    if selector in SELECTOR_NAMES:
        return [
            base.model_copy(update={"selector": selector, "tokens_per_step": k})
            for k in range(1, base.length + 1)
        ]
    raise ConfigError(f"Unknown selector {selector!r}")


def _run_indexed(args) -> BenchRecord:
    cfg, config_id, baseline_steps = args
    return run_config(cfg, config_id, baseline_steps)


def grid_search(
    configs: Sequence[ExperimentConfig],
    workers: int = 1,
    progress: bool = False,
) -> tuple[list[BenchRecord], pd.DataFrame]:
    """
    Run every configuration and return the records with their Pareto frontier.

    The entropy baseline is measured once, on the first configuration's task.
    Records come back in configuration order whatever the worker count.
    """
    if not configs:
        raise ConfigError("Grid is empty")
    baseline_steps = run_config(configs[0].baseline(), 0).mean_steps
    jobs = [(cfg, i, baseline_steps) for i, cfg in enumerate(configs)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(
                tqdm(pool.map(_run_indexed, jobs), total=len(jobs), disable=not progress)
            )
    else:
        records = [_run_indexed(job) for job in tqdm(jobs, disable=not progress)]
    return records, pareto_frontier(records)


def records_frame(records: Sequence[BenchRecord]) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) for r in records], columns=BENCH_COLUMNS)


def pareto_frontier(records) -> pd.DataFrame:
    """
    Configurations not dominated on (fewer mean steps, higher accuracy).

    Sorted by steps, then accuracy descending, then config id; a row joins the
    frontier only if it beats every faster row's accuracy.
    """
    frame = records if isinstance(records, pd.DataFrame) else records_frame(records)
    frame = frame.sort_values(
        ["mean_steps", "accuracy", "config_id"],
        ascending=[True, False, True],
        kind="mergesort",
    )
    keep, best = [], -math.inf
    for index, accuracy in frame["accuracy"].items():
        if accuracy > best:
            keep.append(index)
            best = accuracy
    return frame.loc[keep].reset_index(drop=True)


def write_bench_csv(records: Sequence[BenchRecord], path):
    with open(path, "w") as f:
        f.write(BENCH_HEADER + "\n")
        records_frame(records).to_csv(f, index=False)


def read_bench_csv(path) -> list[BenchRecord]:
    with open(path) as f:
        header = f.readline().strip()
        if header != BENCH_HEADER:
            raise FormatVersionMismatch(f"{path}: expected header {BENCH_HEADER!r}")
        frame = pd.read_csv(f, float_precision="round_trip")
    return [BenchRecord.from_row(row) for _, row in frame.iterrows()]


def emit_reports(
    records: Sequence[BenchRecord],
    out,
    slack: SlackReport | None = None,
    frontier: pd.DataFrame | None = None,
) -> dict[str, str]:
    """
    Write bench.csv, frontier.csv and summary.json.

    With ``slack``, also write its per-record table (slack_records.csv), its
    per-size table (slack.csv) and a slack section in the summary.
    """
    ensure_workspace(out)
    paths = {
        "bench": os.path.join(out, "bench.csv"),
        "frontier": os.path.join(out, "frontier.csv"),
        "summary": os.path.join(out, "summary.json"),
    }
    if frontier is None:
        frontier = pareto_frontier(records)
    write_bench_csv(records, paths["bench"])
    frontier.to_csv(paths["frontier"], index=False)

    summary: dict = {
        "format_version": BENCH_FORMAT_VERSION,
        "n_records": len(records),
        "frontier": frontier.to_dict(orient="records"),
    }
    if slack is not None:
        paths["slack"] = os.path.join(out, "slack.csv")
        paths["slack_records"] = os.path.join(out, "slack_records.csv")
        slack.to_frame().to_csv(paths["slack_records"], index=False)
        table = slack.by_size()
        table.to_csv(paths["slack"], index=False)
        summary["slack"] = {
            "violation_rate": slack.violation_rate,
            "by_size": table.to_dict(orient="records"),
        }
    with open(paths["summary"], "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True, default=float)
    logger.info("Wrote reports to %s", out)
    return paths
