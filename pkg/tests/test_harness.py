import json

import numpy as np
import pytest

from pbrl.algorithm import RunTrace, TraceRecord
from pbrl import harness
from pbrl.errors import ConfigError, OracleFailureError, ValidationError
from pbrl.harness import (
    ExperimentConfig,
    config_hash,
    emit_plot_data,
    load_experiment_config,
    load_plot_data,
    load_trace,
    main,
    resolve_hyperparameters,
    run_experiment,
    save_trace,
    validate_config,
)


def _small(tmp_path, experiment="stackelberg", **overrides):
    values = {
        "experiment": experiment,
        "algorithms": ["pbrl_value"],
        "seeds": [0, 1],
        "out": str(tmp_path),
        "env_size": 3,
        "n_actions": 2,
        "K": 3,
    }
    values.update(overrides)
    return ExperimentConfig(**values)


def _trace(seed, values, metric="leader_value"):
    records = [
        TraceRecord(k, v, 0.0, v, 0.0, float("nan"), 0.0, 80 * (k + 1), 0.01, metrics={metric: 2.0 * v})
        for k, v in enumerate(values)
    ]
    return RunTrace(header={"seed": seed}, records=records, summary={"final_f": values[-1]})


def test_config_file_overlays_the_base(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"K": 7, "seeds": [3, 4], "algorithms": ["pbrl_bellman"]}))
    base = ExperimentConfig(experiment="stackelberg", alpha=0.5)
    config = load_experiment_config(path, base=base)
    assert config.K == 7 and config.seeds == [3, 4]
    assert config.algorithms == ["pbrl_bellman"]
    assert config.alpha == 0.5 and config.experiment == "stackelberg"


def test_bad_config_files(tmp_path):
    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"K": 1, "learning_rate": 0.1}))
    with pytest.raises(ConfigError, match="learning_rate"):
        load_experiment_config(unknown)
    listing = tmp_path / "list.json"
    listing.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_experiment_config(listing)
    with pytest.raises(ConfigError):
        load_experiment_config(tmp_path / "missing.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigError):
        load_experiment_config(broken)


def test_hyperparameter_precedence():
    plain = resolve_hyperparameters(ExperimentConfig(experiment="stackelberg"), "pbrl_bellman")
    assert plain["lam"] == 2.0 and plain["T"] == 1
    published = resolve_hyperparameters(ExperimentConfig(experiment="stackelberg", paper_defaults=True), "pbrl_bellman")
    assert published["lam"] == 7.0 and published["T"] == 10
    explicit = ExperimentConfig(experiment="stackelberg", paper_defaults=True, lam=3.0)
    assert resolve_hyperparameters(explicit, "pbrl_bellman")["lam"] == 3.0
    preference = resolve_hyperparameters(ExperimentConfig(experiment="preference"), "pbrl_value")
    assert preference["lam"] == 10.0 and preference["alpha"] == 1e-3
    incentive = resolve_hyperparameters(ExperimentConfig(experiment="incentive", paper_defaults=True), "pbrl_ni")
    assert incentive["lam"] == 4.0 and incentive["batch"] == 24


@pytest.mark.parametrize(
    "overrides",
    [
        {"experiment": "maze"},
        {"algorithms": ["pbrl_ni"]},
        {"algorithms": []},
        {"seeds": []},
        {"seeds": [1, 1]},
        {"algorithms": ["pbrl_bellman"], "tau": 0.0},
        {"y_param": "logit"},
        {"gradient_mode": "adjoint"},
        {"oracle_method": "newton"},
        {"alpha": -1.0},
        {"threshold": 2.0},
    ],
)
def test_incompatible_configs_are_rejected_up_front(tmp_path, overrides):
    with pytest.raises(ConfigError if "threshold" not in overrides else ValidationError):
        validate_config(_small(tmp_path, **overrides))


def test_config_hash_ignores_the_output_directory(tmp_path):
    a = _small(tmp_path / "a")
    b = _small(tmp_path / "b")
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(_small(tmp_path / "a", K=4))


def test_run_writes_traces_summary_and_plot_data(tmp_path, monkeypatch):
    monkeypatch.setenv("PBRL_THREADS", "2")
    config = _small(tmp_path, algorithms=["pbrl_value", "pbrl_bellman", "independent_pg"])
    result = run_experiment(config)
    out = tmp_path / "stackelberg"
    assert result.out_dir == out
    for algorithm in config.algorithms:
        for seed in config.seeds:
            assert (out / f"{algorithm}_seed{seed}.tsv").exists()
        assert (out / f"plot_{algorithm}_follower_gap.tsv").exists()
        assert (out / f"plot_{algorithm}_leader_value.tsv").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config_hash"] == config_hash(config)
    assert len(summary["runs"]) == 6
    assert summary["aggregate"]["pbrl_value"]["runs"] == 2
    assert "final_leader_value" in summary["aggregate"]["pbrl_value"]["final"]
    assert all("final_x" not in run for run in summary["runs"])


def _failing_runner(monkeypatch, bad_seeds):
    original = harness.RUNNERS["stackelberg"]

    def runner(env, algorithm, cfg, params):
        if cfg.seed in bad_seeds:
            raise OracleFailureError("oracle certificate violated")
        return original(env, algorithm, cfg, params)

    monkeypatch.setitem(harness.RUNNERS, "stackelberg", runner)


def test_a_failed_run_does_not_abort_the_batch(tmp_path, monkeypatch):
    _failing_runner(monkeypatch, {1})
    result = run_experiment(_small(tmp_path))
    out = tmp_path / "stackelberg"
    assert (out / "pbrl_value_seed0.tsv").exists()
    assert not (out / "pbrl_value_seed1.tsv").exists()
    assert [cell.failed for cell in result.cells] == [False, True]
    summary = json.loads((out / "summary.json").read_text())
    bad = next(run for run in summary["runs"] if run["seed"] == 1)
    assert bad["failed"] is True and not bad["diverged"]
    assert "OracleFailureError" in bad["error"]
    assert summary["aggregate"]["pbrl_value"]["runs"] == 1
    assert (out / "plot_pbrl_value_leader_value.tsv").exists()


def test_runs_are_reproducible_across_output_directories(tmp_path, monkeypatch):
    monkeypatch.setenv("PBRL_THREADS", "2")
    first = run_experiment(_small(tmp_path / "a", gradient_mode="mc"))
    second = run_experiment(_small(tmp_path / "b", gradient_mode="mc"))
    assert (first.out_dir / "summary.json").read_text() == (second.out_dir / "summary.json").read_text()


@pytest.mark.parametrize(
    "experiment, algorithms, metrics",
    [
        ("incentive", ["pbrl_ni", "fixed_incentive"], ["ne_gap", "designer_reward"]),
        ("shaping", ["pbrl_value"], ["follower_gap", "original_return"]),
        ("preference", ["pbrl_value"], ["f", "reward_rank_tau", "true_return"]),
    ],
)
def test_every_experiment_runs_end_to_end(tmp_path, experiment, algorithms, metrics):
    config = _small(tmp_path, experiment=experiment, algorithms=algorithms, seeds=[0], n_pairs=20)
    result = run_experiment(config)
    assert not any(cell.diverged for cell in result.cells)
    for algorithm in algorithms:
        for metric in metrics:
            assert (result.out_dir / f"plot_{algorithm}_{metric}.tsv").exists()


def test_zero_iterations_write_no_plot_data(tmp_path):
    result = run_experiment(_small(tmp_path, K=0, seeds=[0]))
    assert result.cells[0].trace.summary["iterations"] == 0
    assert (result.out_dir / "pbrl_value_seed0.tsv").exists()
    assert not list(result.out_dir.glob("plot_*"))


def test_trace_round_trip(tmp_path):
    result = run_experiment(_small(tmp_path, seeds=[0]))
    trace = result.cells[0].trace
    loaded = load_trace(result.out_dir / "pbrl_value_seed0.tsv")
    assert loaded.header["algorithm"] == "pbrl_value" and loaded.header["seed"] == 0
    assert loaded.metric_names == trace.metric_names
    for name in trace.metric_names:
        np.testing.assert_array_equal(loaded.column(name), trace.column(name))
    assert loaded.records[0].k == 0 and isinstance(loaded.records[-1].env_steps, int)


def test_load_trace_rejects_other_files(tmp_path):
    path = tmp_path / "other.tsv"
    path.write_text(json.dumps({"format": "csv"}) + "\n")
    with pytest.raises(ValidationError):
        load_trace(path)


def test_plot_data_mean_std_and_truncation(tmp_path):
    traces = [_trace(0, [1.0, 3.0, 5.0]), _trace(1, [3.0, 5.0])]
    path = emit_plot_data(traces, "f", tmp_path / "plot.tsv")
    table = load_plot_data(path)
    np.testing.assert_array_equal(table["env_steps"], [80.0, 160.0])
    np.testing.assert_allclose(table["mean"], [2.0, 4.0])
    np.testing.assert_allclose(table["std"], [1.0, 1.0])
    np.testing.assert_array_equal(table["seed_1"], [3.0, 5.0])
    with pytest.raises(ValidationError, match="leader_value"):
        emit_plot_data(traces, "designer_reward", tmp_path / "bad.tsv")
    with pytest.raises(ValidationError):
        emit_plot_data([], "f", tmp_path / "empty.tsv")


def _cli(tmp_path, *extra):
    return [
        "stackelberg", "--env-size", "3", "--outer-iters", "2", "--seeds", "0",
        "--algo", "pbrl_value", "--out", str(tmp_path), *extra,
    ]


def test_cli_success_prints_the_summary(tmp_path, capsys):
    assert main(_cli(tmp_path)) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split("\t")[0] == "algorithm"
    assert lines[1].startswith("pbrl_value\t0\t2\t") and lines[1].endswith("ok")


def test_cli_config_errors_exit_with_two(tmp_path, capsys):
    assert main(_cli(tmp_path) + ["--algo", "pbrl_ni"]) == 2
    assert capsys.readouterr().err.startswith("ERROR:")
    assert main(_cli(tmp_path) + ["--seeds", "zero"]) == 2


def test_cli_divergence_exits_with_three(tmp_path, capsys):
    assert main(_cli(tmp_path, "--lambda", "1e18")) == 3
    captured = capsys.readouterr()
    assert "diverged" in captured.out and "diverged" in captured.err
    assert (tmp_path / "stackelberg" / "summary.json").exists()


def test_cli_failed_runs_exit_with_three(tmp_path, monkeypatch, capsys):
    _failing_runner(monkeypatch, {0})
    assert main(_cli(tmp_path)) == 3
    captured = capsys.readouterr()
    assert captured.out.strip().splitlines()[1].endswith("failed")
    assert "1 failed" in captured.err


def test_cli_config_file_overrides_flags(tmp_path):
    cfg = tmp_path / "override.json"
    cfg.write_text(json.dumps({"K": 1}))
    assert main(_cli(tmp_path, "--config", str(cfg))) == 0
    summary = json.loads((tmp_path / "stackelberg" / "summary.json").read_text())
    assert summary["config"]["K"] == 1


def test_cli_plot_command(tmp_path, capsys):
    assert main(_cli(tmp_path)) == 0
    run_dir = tmp_path / "stackelberg"
    target = tmp_path / "curve.tsv"
    assert main(["plot", str(run_dir), "--algo", "pbrl_value", "--metric", "leader_value", "--out", str(target)]) == 0
    assert load_plot_data(target)["mean"].shape == (2,)
    assert main(["plot", str(run_dir), "--algo", "pbrl_value", "--metric", "nope"]) == 2
    assert main(["plot", str(run_dir), "--algo", "pbrl_bellman", "--metric", "f"]) == 2
