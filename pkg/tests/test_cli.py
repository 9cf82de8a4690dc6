import json
import os

import numpy as np
import pandas as pd
import pytest

from depdecode.bench import BENCH_HEADER, read_bench_csv
from depdecode.commands.cli import main
from depdecode.predictor import FeatureConfig, PredictorWeights, load_checkpoint, save_checkpoint


@pytest.fixture
def models_path(cli_runner, temp_dir):
    path = os.path.join(temp_dir, "models.json")
    result = cli_runner.invoke(
        main,
        ["model-gen", "--kind", "markov", "--vocab-size", "3", "--length", "3", "--count", "2", "--out", path],
    )
    assert result.exit_code == 0, result.output
    return path


def test_model_gen_writes_descriptions(models_path):
    with open(models_path) as f:
        payload = json.load(f)
    assert [d["seed"] for d in payload] == [0, 1]
    assert {d["kind"] for d in payload} == {"markov"}


def test_model_gen_rejects_bad_eos(cli_runner, temp_dir):
    result = cli_runner.invoke(
        main,
        ["model-gen", "--kind", "copy", "--vocab-size", "2", "--eos-id", "5", "--out", os.path.join(temp_dir, "m.json")],
    )
    assert result.exit_code == 19
    assert "error[config-error]" in result.output


def test_cache_gen_then_train(cli_runner, temp_dir, models_path):
    cache = os.path.join(temp_dir, "cache.jsonl")
    result = cli_runner.invoke(
        main, ["cache-gen", models_path, "--samples-per-response", "10", "--mask-ratio", "1.0", "--out", cache]
    )
    assert result.exit_code == 0, result.output
    with open(cache) as f:
        lines = f.read().splitlines()
    # Full masks give one record per position.
    assert len(lines) == 2 * 10 * 3

    checkpoint = os.path.join(temp_dir, "predictor.json")
    result = cli_runner.invoke(
        main,
        ["train", models_path, cache, "--epochs", "2", "--batch-size", "8", "--no-revealed", "--out", checkpoint],
    )
    assert result.exit_code == 0, result.output
    assert "Best epoch" in result.output
    _, cfg = load_checkpoint(checkpoint)
    assert (cfg.vocab_size, cfg.length, cfg.revealed) == (3, 3, False)

    out = os.path.join(temp_dir, "predicted")
    result = cli_runner.invoke(
        main,
        ["bench", "--kind", "markov", "--dependency", "predicted", "--checkpoint", checkpoint,
         "--repetitions", "3", "--out", out],
    )
    assert result.exit_code == 0, result.output
    assert os.path.exists(os.path.join(out, "bench.csv"))


def test_decode_writes_traces(cli_runner, temp_dir):
    out = os.path.join(temp_dir, "traces")
    result = cli_runner.invoke(
        main,
        ["decode", "--kind", "arithmetic-mod", "--task-seed", "0", "--task-seed", "1",
         "--prompt-length", "1", "--out", out],
    )
    assert result.exit_code == 0, result.output
    names = sorted(os.listdir(out))
    assert names == ["trace_arithmetic-mod-v3-n3-s0.jsonl", "trace_arithmetic-mod-v3-n3-s1.jsonl"]
    with open(os.path.join(out, names[0])) as f:
        steps = [json.loads(line) for line in f]
    assert steps


def test_bench_writes_reports(cli_runner, temp_dir):
    out = os.path.join(temp_dir, "bench")
    result = cli_runner.invoke(
        main, ["bench", "--selector", "top1", "--tokens-per-step", "1", "--repetitions", "5", "--out", out]
    )
    assert result.exit_code == 0, result.output
    assert "speedup" in result.output
    (record,) = read_bench_csv(os.path.join(out, "bench.csv"))
    assert record.selector == "top1"
    assert record.runs == 5
    assert set(os.listdir(out)) == {"bench.csv", "frontier.csv", "summary.json"}


def test_bench_with_config_file(cli_runner, temp_dir):
    path = os.path.join(temp_dir, "exp.json")
    out = os.path.join(temp_dir, "bench")
    with open(path, "w") as f:
        json.dump({"kind": "independent", "vocab_size": 2, "length": 4, "repetitions": 2, "out": out}, f)
    result = cli_runner.invoke(main, ["bench", "--config", path, "--tau", "inf", "--gamma", "0"])
    assert result.exit_code == 0, result.output
    (record,) = read_bench_csv(os.path.join(out, "bench.csv"))
    assert record.mean_steps == 1.0


def test_grid_sweeps_tokens_per_step(cli_runner, temp_dir):
    out = os.path.join(temp_dir, "grid")
    result = cli_runner.invoke(
        main, ["grid", "--selector", "entropy", "--length", "4", "--repetitions", "2", "--out", out]
    )
    assert result.exit_code == 0, result.output
    records = read_bench_csv(os.path.join(out, "bench.csv"))
    assert [r.tokens_per_step for r in records] == [1, 2, 3, 4]
    assert not pd.read_csv(os.path.join(out, "frontier.csv")).empty


def test_verify_bound(cli_runner, temp_dir):
    result = cli_runner.invoke(main, ["verify-bound", "--instances", "20", "--out", temp_dir])
    assert result.exit_code == 0, result.output
    assert "counterexamples 0" in result.output
    with open(os.path.join(temp_dir, "bound.jsonl")) as f:
        assert len(f.read().splitlines()) >= 20


def test_validate_subadd(cli_runner, temp_dir, models_path):
    out = os.path.join(temp_dir, "slack")
    result = cli_runner.invoke(main, ["validate-subadd", models_path, "--instances", "30", "--out", out])
    assert result.exit_code == 0, result.output
    table = pd.read_csv(os.path.join(out, "slack.csv"))
    assert set(table["subset_size"]) <= {1, 2}
    assert "violation rate" in result.output


def test_report_rebuilds_from_csv(cli_runner, temp_dir):
    first = os.path.join(temp_dir, "first")
    cli_runner.invoke(main, ["bench", "--repetitions", "2", "--out", first])
    second = os.path.join(temp_dir, "second")
    result = cli_runner.invoke(main, ["report", os.path.join(first, "bench.csv"), "--out", second])
    assert result.exit_code == 0, result.output
    assert "1 records" in result.output
    with open(os.path.join(second, "bench.csv")) as f:
        assert f.readline().strip() == BENCH_HEADER


def test_config_error_exit_code(cli_runner, temp_dir):
    result = cli_runner.invoke(main, ["bench", "--prompt-length", "3", "--out", temp_dir])
    assert result.exit_code == 19
    assert "error[config-error]" in result.output
    assert "prompt_length" in result.output


def test_unknown_config_key(cli_runner, temp_dir):
    path = os.path.join(temp_dir, "exp.json")
    with open(path, "w") as f:
        json.dump({"temprature": 0.5}, f)
    result = cli_runner.invoke(main, ["bench", "--config", path])
    assert result.exit_code == 19
    assert "temprature" in result.output


def test_train_rejects_cache_from_other_models(cli_runner, temp_dir, models_path):
    cache = os.path.join(temp_dir, "cache.jsonl")
    result = cli_runner.invoke(main, ["cache-gen", models_path, "--samples-per-response", "2", "--mask-ratio", "1.0", "--out", cache])
    assert result.exit_code == 0, result.output
    others = os.path.join(temp_dir, "others.json")
    result = cli_runner.invoke(
        main,
        ["model-gen", "--kind", "markov", "--vocab-size", "3", "--length", "3", "--seed", "7", "--out", others],
    )
    assert result.exit_code == 0, result.output

    result = cli_runner.invoke(main, ["train", others, cache, "--out", os.path.join(temp_dir, "p.json")])
    assert result.exit_code == 19
    assert "error[config-error]" in result.output
    assert "No model with id" in result.output


def test_unwritable_output_reports_io_error(cli_runner, temp_dir):
    blocker = os.path.join(temp_dir, "blocker")
    with open(blocker, "w") as f:
        f.write("")
    out = os.path.join(blocker, "models.json")
    result = cli_runner.invoke(main, ["model-gen", "--kind", "copy", "--out", out])
    assert result.exit_code == 20
    assert "error[io-error]" in result.output
    assert out in result.output
    assert "Traceback" not in result.output

    result = cli_runner.invoke(main, ["bench", "--repetitions", "1", "--out", os.path.join(blocker, "b")])
    assert result.exit_code == 20
    assert "error[io-error]" in result.output


def test_verify_bound_with_fixed_grid(cli_runner, temp_dir):
    result = cli_runner.invoke(
        main, ["verify-bound", "--instances", "10", "--tau", "0.25", "--gamma", "0", "--out", temp_dir]
    )
    assert result.exit_code == 0, result.output
    with open(os.path.join(temp_dir, "bound.jsonl")) as f:
        reports = [json.loads(line) for line in f]
    assert {(r["tau"], r["gamma"]) for r in reports} == {(0.25, 0.0)}
    assert {r["dep_source"] for r in reports} == {"exact"}


def test_verify_bound_with_predictor(cli_runner, temp_dir):
    cfg = FeatureConfig(vocab_size=2, length=3)
    checkpoint = os.path.join(temp_dir, "predictor.json")
    save_checkpoint(PredictorWeights(np.zeros((cfg.d, cfg.d)), np.zeros((cfg.d, cfg.d))), cfg, checkpoint)
    out = os.path.join(temp_dir, "bound")
    result = cli_runner.invoke(
        main,
        ["verify-bound", "--instances", "10", "--dependency", "predicted", "--checkpoint", checkpoint,
         "--tau", "0.5", "--out", out],
    )
    assert result.exit_code == 0, result.output
    assert "Largest gap" in result.output
    with open(os.path.join(out, "bound.jsonl")) as f:
        reports = [json.loads(line) for line in f]
    assert len(reports) == 10
    assert all(r["dep_source"] == "predicted" and "-v2-n3-" in r["model_id"] for r in reports)

    result = cli_runner.invoke(main, ["verify-bound", "--dependency", "predicted", "--out", out])
    assert result.exit_code == 19
    assert "needs --checkpoint" in result.output


def test_validate_subadd_writes_summary(cli_runner, temp_dir, models_path):
    out = os.path.join(temp_dir, "slack")
    result = cli_runner.invoke(main, ["validate-subadd", models_path, "--instances", "20", "--out", out])
    assert result.exit_code == 0, result.output
    with open(os.path.join(out, "summary.json")) as f:
        summary = json.load(f)
    assert summary["n_records"] == 0
    assert set(summary["slack"]) == {"violation_rate", "by_size"}
    assert os.path.exists(os.path.join(out, "slack_records.csv"))

    bench = os.path.join(temp_dir, "bench")
    cli_runner.invoke(main, ["bench", "--repetitions", "2", "--out", bench])
    merged = os.path.join(temp_dir, "merged")
    result = cli_runner.invoke(
        main,
        ["report", os.path.join(bench, "bench.csv"), "--slack", os.path.join(out, "slack_records.csv"),
         "--out", merged],
    )
    assert result.exit_code == 0, result.output
    with open(os.path.join(merged, "summary.json")) as f:
        folded = json.load(f)
    assert folded["n_records"] == 1
    assert folded["slack"]["violation_rate"] == summary["slack"]["violation_rate"]
    sizes = [row["subset_size"] for row in summary["slack"]["by_size"]]
    assert [row["subset_size"] for row in folded["slack"]["by_size"]] == sizes
