import json
import subprocess
import sys
from pathlib import Path

import pytest

from bdp.cli import main
from bdp.errors import ExperimentError
from bdp.experiments import ExperimentConfig, run_experiment, validate_outputs

MODEL = {"N": 10, "K": 2, "family": "sis", "theta": {"beta": [0.2, 0.02], "mu": 1.0}}


@pytest.fixture()
def model_file(tmp_path):
    path = tmp_path / "model.json"
    path.write_text(json.dumps(MODEL))
    return path


def _run_cli(args):
    return main([str(a) for a in args])


def test_simulate_deterministic_bytes(tmp_path, model_file):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    for out in (out1, out2):
        code = _run_cli(["simulate", "--config", model_file, "--sampler", "conditioned",
                         "--x0", 3, "-T", 30, "--marked", "--seed", 7,
                         "--replicate", 3, "--out", out])
        assert code == 0
    assert (out1 / "trajectory.csv").read_bytes() == (out2 / "trajectory.csv").read_bytes()
    assert (out1 / "trajectory.meta.json").read_bytes() == \
        (out2 / "trajectory.meta.json").read_bytes()


def test_fit_report_roundtrip(tmp_path, model_file):
    from bdp.cli import load_fit_report

    sim = tmp_path / "sim"
    _run_cli(["simulate", "--config", model_file, "--sampler", "q-process",
              "--x0", 3, "-T", 200, "--marked", "--seed", 1, "--out", sim])
    fit_dir = tmp_path / "fit"
    code = _run_cli(["fit", "--config", model_file, "--trajectory",
                     sim / "trajectory.csv", "--estimator", "conditional-mle",
                     "--out", fit_dir])
    assert code == 0
    report = load_fit_report(fit_dir / "fit_report.json")
    assert report["estimator"] == "conditional-mle"
    assert report["converged"] is True
    assert len(report["se"]) == 3
    assert report["info"] == "observed-fisher"


def test_fit_all_estimators(tmp_path, model_file):
    sim = tmp_path / "sim"
    _run_cli(["simulate", "--config", model_file, "--sampler", "q-process",
              "--x0", 3, "-T", 150, "--marked", "--seed", 5, "--out", sim])
    for est in ("naive", "marked-closed-form", "qmle"):
        out = tmp_path / f"fit_{est}"
        code = _run_cli(["fit", "--config", model_file, "--trajectory",
                         sim / "trajectory.csv", "--estimator", est, "--out", out])
        assert code == 0
        report = json.loads((out / "fit_report.json").read_text())
        assert report["theta"]["mu"] > 0


def test_test_subcommand(tmp_path, model_file):
    sim = tmp_path / "sim"
    _run_cli(["simulate", "--config", model_file, "--sampler", "conditioned",
              "--x0", 3, "-T", 60, "--seed", 11, "--out", sim])
    out = tmp_path / "test"
    code = _run_cli(["test", "--config", model_file, "--trajectory",
                     sim / "trajectory.csv", "--mechanism", 2, "--out", out])
    assert code == 0
    report = json.loads((out / "test_report.json").read_text())
    assert report["mechanism"] == 2
    assert 0.0 <= report["p_one_sided"] <= 1.0
    assert report["W"] == pytest.approx(max(0.0, report["Z"]) ** 2)
    assert set(report["reject_at"]) == {"0.01", "0.05", "0.1"}


def test_diagnostics_subcommand(tmp_path, model_file):
    out = tmp_path / "diag"
    code = _run_cli(["diagnostics", "--config", model_file, "--out", out])
    assert code == 0
    payload = json.loads((out / "diagnostics.json").read_text())
    assert payload["gamma"] < 0
    assert len(payload["h"]) == 10
    assert "fisher" in payload["information"]
    assert abs(sum(payload["pi_tilde"]) - 1.0) < 1e-10


def test_error_json_on_stderr(tmp_path, model_file, capsys):
    code = _run_cli(["fit", "--config", model_file, "--trajectory",
                     tmp_path / "missing.csv", "--out", tmp_path])
    assert code == 2
    err = json.loads(capsys.readouterr().err)
    assert "error" in err and "message" in err


def test_cli_entrypoint_subprocess(tmp_path, model_file):
    # console-script path: the module is executable end to end
    result = subprocess.run(
        [sys.executable, "-m", "bdp.cli", "simulate", "--config", str(model_file),
         "--x0", "3", "-T", "20", "--seed", "2", "--out", str(tmp_path / "o")],
        capture_output=True, text=True)
    assert result.returncode == 0
    assert (tmp_path / "o" / "trajectory.csv").exists()


def _experiment(tmp_path, **over):
    data = {"experiment": "consistency", "model": MODEL, "x0": 3,
            "horizons": [30.0, 60.0], "replicates": 4, "base_seed": 5,
            "marked": True, "estimators": ["conditional-mle", "qmle"],
            "sampler": "q-process"}
    data.update(over)
    return ExperimentConfig.from_dict(data)


def test_run_experiment_consistency_artifacts(tmp_path):
    config = _experiment(tmp_path)
    summary = run_experiment(config, tmp_path / "out")
    files = {p.name for p in (tmp_path / "out").iterdir()}
    assert {"replicates.csv", "summary.json", "errors.jsonl"} <= files
    assert any(name.startswith("plot_scatter_") for name in files)
    key = "T=30|conditional-mle|unmarked"
    assert summary["stats"][key]["count"] == 4
    assert "mean" in summary["stats"][key]["b1"]
    validate_outputs(tmp_path / "out")


def test_run_parallel_determinism(tmp_path):
    config = _experiment(tmp_path, replicates=6)
    run_experiment(config, tmp_path / "s", jobs=1)
    run_experiment(config, tmp_path / "p", jobs=2)
    for name in ("replicates.csv", "summary.json", "errors.jsonl"):
        assert (tmp_path / "s" / name).read_bytes() == (tmp_path / "p" / name).read_bytes()
    svgs = sorted(p.name for p in (tmp_path / "s").glob("*.svg"))
    for name in svgs:
        assert (tmp_path / "s" / name).read_bytes() == (tmp_path / "p" / name).read_bytes()


def test_validator_detects_tampering(tmp_path):
    config = _experiment(tmp_path, replicates=3, horizons=[25.0])
    run_experiment(config, tmp_path / "out")
    summary_path = tmp_path / "out" / "summary.json"
    payload = json.loads(summary_path.read_text())
    key = next(iter(payload["stats"]))
    payload["stats"][key]["b1"]["mean"] += 1e-3
    summary_path.write_text(json.dumps(payload))
    with pytest.raises(ExperimentError):
        validate_outputs(tmp_path / "out")


def test_trajectory_experiment(tmp_path):
    config = _experiment(tmp_path, experiment="trajectory", sampler="original",
                         replicates=8, horizons=[40.0], marked=False)
    summary = run_experiment(config, tmp_path / "out")
    assert 0.0 <= summary["stats"]["survival_fraction"] <= 1.0
    assert (tmp_path / "out" / "replicates.csv").read_text().count("\n") == 9


def test_null_test_experiment(tmp_path):
    model = {"N": 10, "K": 2, "family": "sis",
             "theta": {"beta": [0.3, 0.0], "mu": 1.0}, "test_mech": 2}
    config = ExperimentConfig.from_dict({
        "experiment": "null-test", "model": model, "x0": 3, "horizons": [60.0],
        "replicates": 5, "base_seed": 3, "mechanism": 2})
    summary = run_experiment(config, tmp_path / "out")
    stats = summary["stats"]
    assert stats["count"] == 5
    assert 0.0 <= stats["p_w_zero"] <= 1.0
    assert (tmp_path / "out" / "plot_null_z.svg").exists()
    validate_outputs(tmp_path / "out")


def test_estimator_means_experiment(tmp_path):
    config = _experiment(tmp_path, experiment="estimator-means", marked=False,
                         sampler="conditioned",
                         estimators=["naive", "conditional-mle", "qmle"],
                         horizons=[20.0, 40.0], replicates=3)
    run_experiment(config, tmp_path / "out")
    assert (tmp_path / "out" / "plot_means_b1.svg").exists()
    validate_outputs(tmp_path / "out")


def test_diagnostics_experiment(tmp_path):
    config = _experiment(tmp_path, experiment="diagnostics", horizons=[30.0])
    summary = run_experiment(config, tmp_path / "out")
    assert summary["stats"]["gamma"] < 0
    assert "rn_trace" in summary["stats"]
    validate_outputs(tmp_path / "out")


def test_subcritical_abort(tmp_path):
    model = {"N": 5, "K": 1, "family": "sis", "theta": {"beta": [0.02], "mu": 1.0}}
    config = ExperimentConfig.from_dict({
        "experiment": "bias-naive", "model": model, "x0": 1, "horizons": [80.0],
        "replicates": 4, "base_seed": 1, "max_attempts": 10})
    with pytest.raises(ExperimentError, match="subcritical"):
        run_experiment(config, tmp_path / "out")
    errors = (tmp_path / "out" / "errors.jsonl").read_text().splitlines()
    assert len(errors) == 4
    assert all(json.loads(line)["error"] == "RejectionBudgetError" for line in errors)


def test_config_validation():
    with pytest.raises(ExperimentError):
        ExperimentConfig.from_dict({"experiment": "nope", "model": MODEL, "x0": 1,
                                    "horizons": [1.0], "replicates": 1, "base_seed": 0})
    with pytest.raises(ExperimentError):
        ExperimentConfig.from_dict({"experiment": "trajectory", "model": MODEL})
    with pytest.raises(ExperimentError):
        ExperimentConfig.from_dict({"experiment": "trajectory", "model": MODEL, "x0": 1,
                                    "horizons": [], "replicates": 1, "base_seed": 0})


def test_run_cli_with_seed_override(tmp_path, model_file):
    exp = {"experiment": "trajectory", "model": MODEL, "x0": 3, "horizons": [20.0],
           "replicates": 2, "base_seed": 1, "sampler": "original"}
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps(exp))
    code = _run_cli(["run", "--config", cfg, "--out", tmp_path / "r1", "--seed", 99])
    assert code == 0
    summary = json.loads((tmp_path / "r1" / "summary.json").read_text())
    assert summary["config"]["base_seed"] == 99


def test_default_jobs_env(monkeypatch):
    from bdp.experiments import default_jobs

    monkeypatch.setenv("BDP_JOBS", "3")
    assert default_jobs() == 3
    monkeypatch.setenv("BDP_JOBS", "junk")
    assert default_jobs() == 1
    monkeypatch.delenv("BDP_JOBS")
    assert default_jobs() == 1
