import json
import math
from pathlib import Path

import numpy as np
import pytest

from agents.orchestrator import EXIT_FAILED, EXIT_GATE_FAILED, EXIT_PASSED, PipelineOrchestrator, exit_code
from agents.tracing import TRACING_ENABLED, annotate_trace, traced
from cli.main import main, parse_state
from config.pipeline import PipelineConfig, load_config
from control.avi import TrainingSummary
from control.certificates import CertificateBundle
from control.mpc import OcpProblem, solve_ocp, terminal_membership
from models.exceptions import ConfigurationError
from storage.artifact_store import ArtifactStore, format_float

from conftest import toy_document

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


# --------------------------------------------------
# Configuration
# --------------------------------------------------

def test_config_requires_omega(write_config):
    document = toy_document()
    del document["omega"]
    with pytest.raises(ConfigurationError, match="Ω required"):
        load_config(write_config(document))


def test_config_rejects_unknown_system(write_config):
    with pytest.raises(ConfigurationError, match="not registered"):
        load_config(write_config(toy_document(system={"name": "pendulum", "parameters": {}})))


def test_config_rejects_unreadable_documents(tmp_path):
    with pytest.raises(ConfigurationError, match="cannot read"):
        load_config(str(tmp_path / "missing.json"))
    broken = tmp_path / "broken.json"
    broken.write_text("{", encoding="utf-8")
    with pytest.raises(ConfigurationError, match="not valid JSON"):
        load_config(str(broken))


def test_omega_must_lie_inside_state_box():
    config = PipelineConfig.model_validate(toy_document(omega={"half_width": 2.0}))
    with pytest.raises(ConfigurationError, match="inside the state box"):
        config.resolve()


def test_x0_dimension_is_checked():
    config = PipelineConfig.model_validate(toy_document(simulation={"x0": [[0.1, 0.2]]}))
    with pytest.raises(ConfigurationError, match="x0"):
        config.resolve()


def test_config_hash_tracks_content():
    first = PipelineConfig.model_validate(toy_document())
    same = PipelineConfig.model_validate(toy_document())
    other = PipelineConfig.model_validate(toy_document(training={"seed": 1}))
    assert first.config_hash() == same.config_hash()
    assert first.config_hash() != other.config_hash()
    assert len(first.sigma_grid()) == 990


def test_exit_codes():
    assert exit_code({"gates": {"c_below_one": True, "stability_margin": False}}) == EXIT_PASSED
    assert exit_code({"gates": {"horizon_sufficient": False}}) == EXIT_GATE_FAILED
    assert exit_code({"gates": {}, "error": "boom"}) == EXIT_FAILED
    assert exit_code({"status": "failed"}) == EXIT_FAILED


def test_parse_state():
    assert parse_state("0.2,0.2,0,0") == [0.2, 0.2, 0.0, 0.0]


# --------------------------------------------------
# Command line
# --------------------------------------------------

def test_commands_need_config(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path)]) == EXIT_FAILED
    assert "needs --config" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == EXIT_FAILED


def test_report_on_empty_directory(tmp_path, capsys):
    out = tmp_path / "nothing"
    assert main(["report", "--out", str(out)]) == EXIT_PASSED
    assert f"no artifacts in {out}" in capsys.readouterr().out


def test_toy_pipeline_end_to_end(tmp_path, write_config, capsys):
    out = tmp_path / "run"
    assert main(["run", "--config", write_config(toy_document()), "--out", str(out)]) == EXIT_PASSED

    for name in ("training.json", "weights.csv", "errors.csv", "theorem1.csv", "policy_weights.csv",
                 "certificates.json", "controllability.csv", "closedloop.json",
                 "trajectory_avi_0.csv", "trajectory_avi_1.csv", "manifest.json"):
        assert (out / name).is_file(), name

    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["gates"]["c_below_one"] is True
    assert manifest["gates"]["inputs_in_U"] is True
    assert manifest["gates"]["horizon_sufficient"] is True
    assert manifest["x0"] == [[0.5], [-0.4]]
    assert manifest["commands"] == ["train", "certify", "simulate"]

    training = json.loads((out / "training.json").read_text())
    assert training["c"] < 1.0
    assert training["basis_size"] == 1

    certificates = json.loads((out / "certificates.json").read_text())
    assert certificates["N_user"] == 6
    assert certificates["N_user_certified"] is True
    assert certificates["horizon_table"][0]["N"] == certificates["N_prime"]

    runs = json.loads((out / "closedloop.json").read_text())["runs"]
    assert set(runs) == {"avi_0", "avi_1"}
    assert all(run["final_norm"] < 1e-5 for run in runs.values())
    for run in runs.values():
        assert run["alpha_required"] > 0.0
        assert run["rdp_passed"] is True
        assert run["min_alpha"] >= run["alpha_required"] - 1e-6
        assert run["bound_holds"] is True
        assert run["J"] <= run["performance_bound"] + 1e-9
        assert len(run["terminal_in_Xf"]) == run["steps"]
        assert all(run["terminal_in_Xf"])

    bundle = CertificateBundle.model_validate(certificates)
    assert bundle.N_lower <= 6
    summary = TrainingSummary.model_validate(training)
    config = PipelineConfig.model_validate(toy_document())
    resolved = config.resolve()
    problem = OcpProblem(resolved.system, resolved.cost, summary.value(), 6,
                         resolved.state_box, resolved.input_box)
    for x0 in (0.5, -0.4, 0.9, 1.0):
        assert terminal_membership(problem, solve_ocp(problem, np.array([x0])), bundle).inside

    report = capsys.readouterr().out
    assert "Training" in report and "Certificates" in report and "Closed loop" in report
    assert "missing artifacts" not in report


def test_stages_run_separately_and_report_missing_artifacts(tmp_path, write_config, capsys):
    config = write_config(toy_document())
    out = str(tmp_path / "stages")
    assert main(["train", "--config", config, "--out", out]) == EXIT_PASSED
    capsys.readouterr()

    assert main(["report", "--out", out]) == EXIT_PASSED
    report = capsys.readouterr().out
    assert "missing artifacts: certificates.json, closedloop.json" in report
    assert "horizon_sufficient" in report and "not evaluated" in report

    assert main(["certify", "--config", config, "--out", out]) == EXIT_PASSED
    assert main(["simulate", "--config", config, "--out", out, "--terminal", "lqr"]) == EXIT_PASSED
    runs = json.loads((tmp_path / "stages" / "closedloop.json").read_text())["runs"]
    assert set(runs) == {"lqr_0", "lqr_1"}
    assert "performance_bound" not in runs["lqr_0"]


def test_certification_refuses_large_error_margin(tmp_path, write_config, capsys):
    config = write_config(toy_document())
    out = tmp_path / "refused"
    assert main(["train", "--config", config, "--out", str(out)]) == EXIT_PASSED

    training = json.loads((out / "training.json").read_text())
    training["c"] = 1.5
    (out / "training.json").write_text(json.dumps(training))
    capsys.readouterr()

    assert main(["certify", "--config", config, "--out", str(out)]) == EXIT_GATE_FAILED
    assert "adjust omega" in capsys.readouterr().err
    assert not (out / "certificates.json").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["gates"]["c_below_one"] is False


def test_zero_margin_override_gives_unit_alpha1(tmp_path, write_config):
    config = write_config(toy_document(certification={"c_override": 0.0}))
    out = tmp_path / "override"
    assert main(["train", "--config", config, "--out", str(out)]) == EXIT_PASSED
    assert main(["certify", "--config", config, "--out", str(out)]) == EXIT_PASSED

    certificates = json.loads((out / "certificates.json").read_text())
    assert certificates["c"] == 0.0
    assert all(row["alpha1"] == 1.0 for row in certificates["horizon_table"])


def test_training_is_reproducible(tmp_path, write_config):
    config = write_config(toy_document())
    for name in ("a", "b"):
        assert main(["train", "--config", config, "--out", str(tmp_path / name)]) == EXIT_PASSED
    assert (tmp_path / "a" / "weights.csv").read_bytes() == (tmp_path / "b" / "weights.csv").read_bytes()
    assert (tmp_path / "a" / "errors.csv").read_bytes() == (tmp_path / "b" / "errors.csv").read_bytes()


def test_simulation_skips_start_outside_state_box(tmp_path, write_config):
    config = write_config(toy_document())
    out = tmp_path / "skip"
    assert main(["train", "--config", config, "--out", str(out)]) == EXIT_PASSED
    assert main(["simulate", "--config", config, "--out", str(out), "--x0", "1.5"]) == EXIT_PASSED

    runs = json.loads((out / "closedloop.json").read_text())["runs"]
    assert runs["avi_0"]["skipped"] == "x0 lies outside the state box"
    assert not (out / "trajectory_avi_0.csv").exists()


def test_simulation_needs_training(tmp_path):
    config = PipelineConfig.model_validate(toy_document())
    state = PipelineOrchestrator().run_stage("simulate", config, str(tmp_path / "empty"))
    assert state["status"] == "failed"
    assert "run 'train' first" in state["error"]
    with pytest.raises(ValueError):
        PipelineOrchestrator().run_stage("certify", None, str(tmp_path))


@pytest.mark.slow
def test_wide_rendezvous_domain_is_refused(tmp_path):
    out = tmp_path / "wide"
    config = str(CONFIGS / "rendezvous_wide.json")
    assert main(["train", "--config", config, "--out", str(out)]) == EXIT_GATE_FAILED

    training = json.loads((out / "training.json").read_text())
    assert training["c"] >= 1.0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["gates"]["c_below_one"] is False


# --------------------------------------------------
# Artifacts and tracing
# --------------------------------------------------

def test_json_artifacts_use_seventeen_digits(tmp_path):
    store = ArtifactStore(str(tmp_path))
    store.write_json("values.json", {"tenth": 0.1, "one": 1.0, "big": 1e20, "missing": math.inf,
                                     "count": 3, "flags": [True, False], "nested": {"x": [np.float64(0.2)]}})
    text = (tmp_path / "values.json").read_text()
    assert '"tenth": 0.10000000000000001' in text
    assert '"one": 1.0' in text
    assert '"missing": null' in text
    assert '"count": 3' in text

    values = store.read_json("values.json")
    assert values["tenth"] == 0.1 and isinstance(values["one"], float)
    assert values["big"] == 1e20
    assert values["flags"] == [True, False]
    assert values["nested"]["x"] == [0.2]
    assert format_float(-2.0) == "-2.0"


@pytest.mark.skipif(TRACING_ENABLED, reason="Langfuse keys are configured")
def test_stage_tracing_is_inert_without_keys():
    def stage(value):
        return value + 1

    assert traced("train")(stage) is stage
    assert annotate_trace("train", output_dir="runs") is None
