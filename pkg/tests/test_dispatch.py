import json
from pathlib import Path

import pytest

import dispatch
from dispatch import main
from utils import EXIT_CONFIG_ERROR, EXIT_OK, EXIT_RUNTIME_ERROR, ConfigError
from validator import ExperimentConfig, load_config
from workload import make_burst_spec

LENGTHS = [
    "--input-mean", "300",
    "--input-std", "150",
    "--output-mean", "40",
    "--output-std", "20",
    "--max-len", "2048",
    "--kv-capacity", "4096",
]
SMALL = [
    "--workload", "cyclic-burst",
    "--mean-rate", "1",
    "--duration", "40",
    "--cycle-len", "20",
    "--seed", "7",
    *LENGTHS,
]


def run_cli(tmp_path, *extra, name="run"):
    out = tmp_path / name
    code = main(["run", *SMALL, *extra, "--output-dir", str(out)])
    return code, out


# ------------------------
# RUN
# ------------------------
def test_run_writes_artifacts(tmp_path, capsys):
    code, out = run_cli(tmp_path)
    assert code == EXIT_OK
    for name in ("requests.csv", "timeseries.csv", "summary.json"):
        assert (out / name).exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["policy"] == "qoe_aware"
    assert summary["seed"] == 7
    assert summary["n_requests"] > 0
    assert "avg_qoe=" in capsys.readouterr().out


def test_run_is_reproducible(tmp_path):
    _, a = run_cli(tmp_path, name="a")
    _, b = run_cli(tmp_path, name="b")
    assert (a / "requests.csv").read_bytes() == (b / "requests.csv").read_bytes()
    assert (a / "timeseries.csv").read_bytes() == (b / "timeseries.csv").read_bytes()


@pytest.mark.parametrize("policy", ["fcfs", "lqsf", "andes"])
def test_every_policy_runs(tmp_path, policy):
    code, out = run_cli(tmp_path, "--policy", policy)
    assert code == EXIT_OK
    assert (out / "summary.json").exists()


def test_verbose_run_writes_surplus_log(tmp_path):
    code, out = run_cli(tmp_path, "--verbose")
    assert code == EXIT_OK
    assert (out / "surplus.csv").exists()


def test_trace_workload(tmp_path):
    trace = tmp_path / "trace.csv"
    trace.write_text("arrival_s,input_len,output_len\n0,200,20\n0.5,300,30\n1.0,100,10\n")
    out = tmp_path / "out"
    code = main(["run", "--workload", "trace", "--trace", str(trace), "--policy", "fcfs", "--output-dir", str(out)])
    assert code == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_requests"] == 3
    assert summary["n_finished"] == 3


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("STREAMSCHED_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["run", *SMALL]) == EXIT_OK
    assert (tmp_path / "env" / "summary.json").exists()


def test_flags_override_config_file(tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"policy": "fcfs", "seed": 3, "mean_rate_rps": 0.5}))
    out = tmp_path / "out"
    code = main(["run", "--config", str(config), *SMALL, "--policy", "lqsf", "--output-dir", str(out)])
    assert code == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert summary["policy"] == "lqsf"
    assert summary["seed"] == 7


# ------------------------
# CONFIG ERRORS
# ------------------------
@pytest.mark.parametrize(
    "argv",
    [
        ["--workload", "trace", "--trace", "x.csv", "--rate", "2"],
        [*SMALL, "--policy", "fcfs", "--solver", "dp"],
        [*SMALL, "--policy", "fcfs", "--delta-t", "1"],
        [*SMALL, "--intensity", "3", "--duration-frac", "0.4"],
        [*SMALL, "--policy", "round-robin"],
        [*SMALL, "--speed-weights", "1,2"],
        [*SMALL, "--solver", "dp", "--greedy-skip"],
        [*SMALL, "--dataset", "wiki"],
        [*SMALL, "--rate", "2"],
        ["--workload", "poisson", "--seed", "1"],
        ["--workload", "poisson", "--rate", "1"],
        ["--chunk-size", "abc"],
        [*SMALL, "--policy", "fcfs", "--no-refiner"],
        [*SMALL, "--overhead-budget", "0"],
    ],
)
def test_config_errors_exit_two(argv, capsys):
    assert main(["run", *argv]) == EXIT_CONFIG_ERROR
    assert capsys.readouterr().err


def test_missing_trace_exits_two(tmp_path):
    code = main(["run", "--workload", "trace", "--trace", str(tmp_path / "none.csv")])
    assert code == EXIT_CONFIG_ERROR


def test_missing_config_file_exits_two(tmp_path):
    assert main(["run", "--config", str(tmp_path / "none.json"), *SMALL]) == EXIT_CONFIG_ERROR


def test_dp_budget_overrun_exits_two(tmp_path):
    # decoding at 2 tok/s is slower than every reader, so the solver runs on the first boundary
    profile = tmp_path / "profile.json"
    profile.write_text(
        json.dumps(
            {
                "decode_points": [[1, 0.5], [64, 1.0]],
                "prefill_throughput": 5000,
                "swap_bandwidth": 20000,
                "kv_capacity": 4096,
            }
        )
    )
    code, _ = run_cli(tmp_path, "--profile", str(profile), "--solver", "dp", "--dp-budget", "10")
    assert code == EXIT_CONFIG_ERROR


def test_unexpected_failure_exits_three(tmp_path, monkeypatch):
    def boom(cfg):
        raise RuntimeError("boom")

    monkeypatch.setattr(dispatch, "simulate", boom)
    code, _ = run_cli(tmp_path)
    assert code == EXIT_RUNTIME_ERROR


def test_load_config_layers_defaults_file_and_flags(tmp_path):
    config = tmp_path / "c.json"
    config.write_text(json.dumps({"workload": "poisson", "rate_rps": 2.0}))
    cfg = load_config({"seed": 5}, str(config), {"rate_rps": 1.0, "policy": "fcfs"})
    assert (cfg.workload, cfg.rate_rps, cfg.policy_name, cfg.seed) == ("poisson", 2.0, "fcfs", 5)
    with pytest.raises(ConfigError):
        load_config({"seed": 5, "unknown_key": 1})


def test_config_defaults():
    cfg = ExperimentConfig(workload="poisson", rate_rps=1.0, seed=0)
    settings = cfg.policy_settings()
    assert settings.name == "qoe_aware"
    assert settings.delta_t == 2.0
    assert settings.watermark == 0.9
    assert settings.refiner is True
    assert settings.overhead_budget == 0.1
    assert cfg.duration == 1200.0
    assert cfg.profile().kv_capacity == 65536


# ------------------------
# COMPARE / CDF / SWEEP / CALIBRATE
# ------------------------
def test_compare_two_runs(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("COLUMNS", "200")
    _, a = run_cli(tmp_path, "--policy", "fcfs", name="fcfs")
    _, b = run_cli(tmp_path, name="andes")
    capsys.readouterr()
    assert main(["compare", str(a), str(b / "summary.json")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "avg_qoe" in out
    assert "p99_ttft" in out


def test_cdf_command(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("COLUMNS", "200")
    _, out = run_cli(tmp_path)
    capsys.readouterr()
    assert main(["cdf", str(out), "--metric", "ttft"]) == EXIT_OK
    assert "1" in capsys.readouterr().out
    assert main(["cdf", str(tmp_path / "missing")]) == EXIT_CONFIG_ERROR


def test_sweep_writes_one_run_per_value(tmp_path, capsys):
    root = tmp_path / "sweep"
    code = main(["sweep", *SMALL, "--key", "delta_t", "--values", "1,3", "--output-dir", str(root)])
    assert code == EXIT_OK
    assert (root / "delta_t=1.0" / "summary.json").exists()
    assert (root / "delta_t=3.0" / "summary.json").exists()
    assert len(capsys.readouterr().out.strip().splitlines()) == 2


def test_sweep_rejects_unknown_key(tmp_path):
    assert main(["sweep", *SMALL, "--key", "warp", "--values", "1", "--output-dir", str(tmp_path)]) == EXIT_CONFIG_ERROR


def test_calibrate_finds_a_sustainable_rate(tmp_path, capsys):
    code = main(
        [
            "calibrate",
            "--seed", "3",
            "--duration", "30",
            *LENGTHS,
            "--iterations", "2",
            "--output-dir", str(tmp_path),
        ]
    )
    assert code == EXIT_OK
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert line.startswith("sustainable rate:")
    assert float(line.split()[2]) >= 1.0


def test_burst_options_go_through_the_checked_constructor(monkeypatch):
    import validator

    seen = []

    def spy(*args):
        seen.append(args)
        return make_burst_spec(*args)

    monkeypatch.setattr(validator, "make_burst_spec", spy)
    cfg = ExperimentConfig(mean_rate_rps=1.5, intensity=2.5, seed=1)
    burst = cfg.burst_spec()
    assert seen == [(2.5, 0.35, 1200.0, 1.5)]
    assert (burst.intensity, burst.duration_frac, burst.mean_rate_rps) == (2.5, 0.35, 1.5)


def test_lqsf_accepts_refiner_options():
    cfg = ExperimentConfig(
        mean_rate_rps=1.0, seed=1, policy="lqsf", refiner=False, overhead_budget=0.2
    )
    settings = cfg.policy_settings()
    assert settings.refiner is False
    assert settings.overhead_budget == 0.2


# ------------------------
# RESOURCE SAVINGS
# ------------------------
def tiny_poisson(**extra):
    return ExperimentConfig(
        workload="poisson",
        rate_rps=1.0,
        seed=0,
        duration_s=10.0,
        input_mean=100.0,
        input_std=10.0,
        output_mean=20.0,
        output_std=5.0,
        max_len=512,
        kv_capacity=4096,
        **extra,
    )


def capacity_oracle(monkeypatch, needs):
    """Replaces simulation: a policy meets the QoE target from `needs[policy]` slots up."""
    monkeypatch.setattr(dispatch, "simulate", lambda cfg: cfg)
    monkeypatch.setattr(
        dispatch,
        "meets_target",
        lambda cfg, target: cfg.profile().kv_capacity >= needs[cfg.policy_name],
    )


def test_min_capacity_bisects_to_the_threshold(monkeypatch):
    capacity_oracle(monkeypatch, {"qoe_aware": 3000})
    assert dispatch.min_capacity(tiny_poisson(), iterations=20) == 3000


def test_min_capacity_doubles_past_the_configured_cache(monkeypatch):
    capacity_oracle(monkeypatch, {"qoe_aware": 9000})
    assert dispatch.min_capacity(tiny_poisson(), iterations=20) == 9000


def test_resource_savings_compares_against_each_baseline(monkeypatch):
    capacity_oracle(monkeypatch, {"qoe_aware": 1000, "fcfs": 4000, "lqsf": 2000})
    capacities, savings = dispatch.resource_savings(
        tiny_poisson(solver="dp"), ["andes", "fcfs", "lqsf"], iterations=20
    )
    assert capacities == {"andes": 1000, "fcfs": 4000, "lqsf": 2000}
    assert savings["fcfs"] == pytest.approx(0.75)
    assert savings["lqsf"] == pytest.approx(0.5)


@pytest.mark.parametrize("policies, target", [(["andes"], 0.95), (["andes", "fcfs"], 1.5)])
def test_resource_savings_rejects_bad_requests(policies, target):
    with pytest.raises(ConfigError):
        dispatch.resource_savings(tiny_poisson(), policies, target)


def test_savings_command(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("COLUMNS", "200")
    code = main(["savings", *SMALL, "--iterations", "2", "--output-dir", str(tmp_path)])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert "kv_capacity" in out
    assert out.strip().splitlines()[-1].startswith("resource savings of andes vs fcfs:")
