import json
import logging
import os

import click
import pandas as pd
from pydantic import ValidationError

from depdecode.bench import (
    build_grid,
    emit_reports,
    grid_search,
    load_experiment_config,
    read_bench_csv,
    run_benchmark,
)
from depdecode.decoding import SELECTOR_NAMES, decode, write_trace
from depdecode.errors import ConfigError, DepDecodeError, DimensionMismatch, IOFailure
from depdecode.oracle import (
    TASK_KINDS,
    ModelDescription,
    load_models,
    sample_joint,
    save_model_descriptions,
)
from depdecode.predictor import (
    FeatureConfig,
    PredictedDependency,
    TrainingConfig,
    attach_features,
    generate_tv_cache,
    load_checkpoint,
    read_tv_cache,
    save_checkpoint,
    train_predictor,
    write_tv_cache,
)
from depdecode.selection import TAU_GRID
from depdecode.utils import ensure_workspace, spawn_rng
from depdecode.verification import (
    BOUND_GAMMAS,
    SlackReport,
    run_bound_suite,
    run_slack_experiment,
    write_bound_reports,
)

logger = logging.getLogger(__name__)


class DepDecodeGroup(click.Group):
    """Reports library errors as ``error[category]: message`` with their exit code."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except DepDecodeError as e:
            click.echo(f"error[{e.category}]: {e}", err=True)
            ctx.exit(e.exit_code)
        except OSError as e:
            where = f"{e.filename}: " if e.filename else ""
            click.echo(f"error[{IOFailure.category}]: {where}{e.strerror or e}", err=True)
            ctx.exit(IOFailure.exit_code)


def experiment_options(f):
    """Flags overriding keys of an experiment config file."""
    options = [
        click.option("--config", "config_path", type=click.Path(exists=True), help="Experiment config (JSON)"),
        click.option("--kind", type=click.Choice(TASK_KINDS), default=None, help="Task family"),
        click.option("--vocab-size", type=int, default=None),
        click.option("--length", type=int, default=None),
        click.option("--task-seed", "seeds", type=int, multiple=True, help="Task model seed; repeatable"),
        click.option("--prompt-length", type=int, default=None, help="Leading positions revealed from a sampled response"),
        click.option("--selector", type=click.Choice(SELECTOR_NAMES), default=None),
        click.option("--tau", type=float, default=None, help="Dependency bound"),
        click.option("--gamma", type=float, default=None, help="Top-1 confidence threshold"),
        click.option("--tokens-per-step", type=int, default=None, help="k for entropy/top1/token-order"),
        click.option("--kl-threshold", type=float, default=None),
        click.option("--conf-threshold", type=float, default=None),
        click.option("--history", type=int, default=None, help="KLASS history length"),
        click.option("--dependency", type=click.Choice(["exact", "predicted"]), default=None),
        click.option("--checkpoint", type=click.Path(exists=True), default=None),
        click.option("--temperature", type=float, default=None),
        click.option("--top-p", type=float, default=None),
        click.option("--eos-fill/--no-eos-fill", default=None),
        click.option("--repetitions", type=int, default=None),
        click.option("--workers", type=int, default=None),
        click.option("--verify/--no-verify", default=None, help="Check the bound at every demask step"),
        click.option("--seed", type=int, default=None),
        click.option("--out", type=click.Path(), default=None, help="Output directory"),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def _experiment(config_path, seeds, **overrides):
    return load_experiment_config(config_path, seeds=list(seeds) or None, **overrides)


@click.group(cls=DepDecodeGroup)
@click.option("-v", "--verbose", is_flag=True, help="Debug logging")
def main(verbose):
    """Dependency-guided parallel decoding over exact tabular models."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command("model-gen")
@click.option("--kind", type=click.Choice(TASK_KINDS), required=True)
@click.option("--vocab-size", type=int, default=3, show_default=True)
@click.option("--length", type=int, default=3, show_default=True)
@click.option("--eos-id", type=int, default=None, help="Defaults to the last token")
@click.option("--concentration", type=float, default=1.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True, help="First model seed")
@click.option("--count", type=int, default=1, show_default=True, help="Models with consecutive seeds")
@click.option("--out", type=click.Path(), default="models.json", show_default=True)
def model_gen(kind, vocab_size, length, eos_id, concentration, seed, count, out):
    """Write model descriptions and check that each one builds."""
    try:
        descriptions = [
            ModelDescription(
                kind=kind,
                vocab_size=vocab_size,
                eos_id=eos_id,
                length=length,
                seed=seed + i,
                concentration=concentration,
            )
            for i in range(count)
        ]
    except ValidationError as e:
        raise ConfigError(str(e)) from None
    for description in descriptions:
        description.build()
    save_model_descriptions(descriptions, out)
    click.echo(f"Saved {count} model description(s) to {out}")


@main.command("cache-gen")
@click.argument("models_path", type=click.Path(exists=True))
@click.option("--samples-per-response", type=int, default=5, show_default=True)
@click.option("--mask-ratio", type=float, default=None, help="Fixed ratio instead of t ~ U(0, 1)")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), default="tv_cache.jsonl", show_default=True)
def cache_gen(models_path, samples_per_response, mask_ratio, seed, out):
    """Generate single-realization dependency columns for predictor training."""
    models = load_models(models_path)
    records = generate_tv_cache(
        models, samples_per_response, seed, mask_ratio=mask_ratio, progress=True
    )
    count = write_tv_cache(records, out)
    click.echo(f"Saved {count} cache records to {out}")


@main.command()
@click.argument("models_path", type=click.Path(exists=True))
@click.argument("cache_path", type=click.Path(exists=True))
@click.option("--lr", type=float, default=1e-2, show_default=True)
@click.option("--weight-decay", type=float, default=0.01, show_default=True)
@click.option("--epochs", type=int, default=5, show_default=True)
@click.option("--batch-size", type=int, default=32, show_default=True)
@click.option("--val-fraction", type=float, default=0.1, show_default=True)
@click.option("--marginal/--no-marginal", default=True, help="Marginal-vector features")
@click.option("--position/--no-position", default=True, help="Position one-hot features")
@click.option("--revealed/--no-revealed", default=True, help="Revealed-bitmap features")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), default="predictor.json", show_default=True)
def train(
    models_path,
    cache_path,
    lr,
    weight_decay,
    epochs,
    batch_size,
    val_fraction,
    marginal,
    position,
    revealed,
    seed,
    out,
):
    """Fit the dependency predictor on a TV cache."""
    models = load_models(models_path)
    shapes = {(m.vocab.size, m.length) for m in models}
    if len(shapes) != 1:
        raise DimensionMismatch(f"Models must share vocab size and length, got {shapes}")
    ((vocab_size, length),) = shapes
    feature_cfg = FeatureConfig(vocab_size, length, marginal, position, revealed)
    records = attach_features(read_tv_cache(cache_path), models, feature_cfg)
    hyper = TrainingConfig(
        lr=lr,
        weight_decay=weight_decay,
        epochs=epochs,
        batch_size=batch_size,
        val_fraction=val_fraction,
    )
    weights, report = train_predictor(records, feature_cfg, hyper, seed, progress=True)
    save_checkpoint(weights, feature_cfg, out)
    click.echo(
        f"Best epoch {report.best_epoch} with loss {report.best_loss:.6g} "
        f"(initial {report.initial_train_loss:.6g}); saved to {out}"
    )


@main.command("decode")
@experiment_options
def decode_command(config_path, seeds, **overrides):
    """Decode one sequence per task seed and write the step traces."""
    cfg = _experiment(config_path, seeds, **overrides)
    ensure_workspace(cfg.out)
    selector = cfg.build_selector()
    for index, model in enumerate(cfg.models()):
        rng = spawn_rng(cfg.seed, index)
        response = sample_joint(model, rng)
        prompt = {p: response[p] for p in range(cfg.prompt_length)}
        sequence, trace = decode(model, selector, cfg.sampler, rng, cfg.eos_fill, prompt)
        path = os.path.join(cfg.out, f"trace_{model.prompt_id}.jsonl")
        write_trace(trace, path)
        click.echo(
            f"{model.prompt_id}: {list(sequence)} in {trace.step_count} steps "
            f"(eos-filled {list(trace.eos_filled)})"
        )


@main.command()
@experiment_options
def bench(config_path, seeds, **overrides):
    """Benchmark one configuration."""
    cfg = _experiment(config_path, seeds, **overrides)
    records = run_benchmark(cfg, progress=True)
    paths = emit_reports(records, cfg.out)
    (record,) = records
    click.echo(
        f"accuracy {record.accuracy:.4f}, mean steps {record.mean_steps:.3f}, "
        f"speedup {record.speedup:.3f}x"
    )
    click.echo(f"Saved reports to {paths['bench']}")


@main.command()
@experiment_options
def grid(config_path, seeds, **overrides):
    """Search the hyperparameter grid of the configured selector."""
    cfg = _experiment(config_path, seeds, **overrides)
    configs = build_grid(cfg, cfg.selector)
    records, frontier = grid_search(configs, workers=cfg.workers, progress=True)
    emit_reports(records, cfg.out, frontier=frontier)
    click.echo(f"{len(records)} configurations, {len(frontier)} on the Pareto frontier")


@main.command("verify-bound")
@click.option("--instances", type=int, default=1000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--tau", "taus", type=float, multiple=True, help="Dependency bound; repeatable, defaults to the tau grid")
@click.option("--gamma", "gammas", type=float, multiple=True, help="Top-1 threshold; repeatable, defaults to 0, 0.5 and 0.9")
@click.option("--dependency", type=click.Choice(["exact", "predicted"]), default="exact", show_default=True)
@click.option("--checkpoint", type=click.Path(exists=True), default=None, help="Predictor checkpoint for --dependency predicted")
@click.option("--out", type=click.Path(), default="results", show_default=True)
@click.pass_context
def verify_bound(ctx, instances, seed, taus, gammas, dependency, checkpoint, out):
    """Check the dependency bound on random instances."""
    options: dict = {"taus": taus or TAU_GRID, "gammas": gammas or BOUND_GAMMAS}
    if dependency == "predicted":
        if checkpoint is None:
            raise ConfigError("--dependency predicted needs --checkpoint")
        weights, feature_cfg = load_checkpoint(checkpoint)
        options.update(
            dep_source="predicted",
            predictor=PredictedDependency(weights, feature_cfg),
            vocab_sizes=(feature_cfg.vocab_size,),
            lengths=(feature_cfg.length,),
        )
    ensure_workspace(out)
    suite = run_bound_suite(instances, seed, progress=True, **options)
    write_bound_reports(suite.reports, os.path.join(out, "bound.jsonl"))
    click.echo(
        f"{suite.n_instances} instances, assumption holds on "
        f"{suite.n_assumption_holds}, counterexamples {len(suite.counterexamples)}"
    )
    if dependency == "predicted":
        click.echo(f"Largest gap of measured TV over tau {suite.max_gap:.6g}")
    if suite.counterexamples:
        ctx.exit(1)


@main.command("validate-subadd")
@click.argument("models_path", type=click.Path(exists=True))
@click.option("--instances", type=int, default=1000, show_default=True)
@click.option("--max-subset-size", type=int, default=6, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), default="results", show_default=True)
def validate_subadd(models_path, instances, max_subset_size, seed, out):
    """Measure sub-additivity slack on random masks and subsets."""
    models = load_models(models_path)
    slack = run_slack_experiment(models, instances, max_subset_size, seed, progress=True)
    paths = emit_reports([], out, slack=slack)
    click.echo(slack.by_size().to_string(index=False))
    click.echo(f"Overall violation rate {slack.violation_rate:.4f}; saved to {paths['summary']}")


@main.command()
@click.argument("bench_csv", type=click.Path(exists=True))
@click.option(
    "--slack",
    "slack_csv",
    type=click.Path(exists=True),
    default=None,
    help="slack_records.csv from validate-subadd to fold into the summary",
)
@click.option("--out", type=click.Path(), default="results", show_default=True)
def report(bench_csv, slack_csv, out):
    """Rebuild the frontier and summary from a bench CSV."""
    records = read_bench_csv(bench_csv)
    slack = None
    if slack_csv:
        slack = SlackReport.from_frame(pd.read_csv(slack_csv, float_precision="round_trip"))
    paths = emit_reports(records, out, slack=slack)
    with open(paths["summary"]) as f:
        summary = json.load(f)
    click.echo(f"{summary['n_records']} records, {len(summary['frontier'])} on the frontier")


if __name__ == "__main__":
    main()
