import json
import logging
from pathlib import Path

import numpy as np
import pytest

from fsi_toolbox import cli
from fsi_toolbox.classes import (
    ConfigError,
    StageContextFilter,
    StageError,
    StageFormatter,
)
from fsi_toolbox.experiment import (
    CheckResult,
    Experiment,
    ExperimentOutcome,
    configure_logging,
    run_experiment,
    summarize_checks,
    sweep,
    verify,
)
from fsi_toolbox.yamlparsers import ExperimentConfig

data_dir = Path(__file__).parent / "test_data"

ROBUST_CHECKS = (
    "added_mass_psd",
    "added_mass_crosscheck",
    "self_adjoint",
    "spectrum_real",
    "spectrum_negative",
    "eigen_residuals",
    "kalman_rank",
    "riccati_residual",
    "closed_loop_poles",
    "open_loop_rate",
)


@pytest.fixture(scope="module")
def config():
    return ExperimentConfig.from_yaml_path(data_dir / "experiment.yaml")


@pytest.fixture(scope="module")
def outcome(config, tmp_path_factory):
    return run_experiment(config, out=tmp_path_factory.mktemp("run"))


class TestRunExperiment:
    def test_status(self, outcome):
        assert outcome.status == 0

    @pytest.mark.parametrize(
        "artifact",
        [
            "summary.json",
            "config.yaml",
            "mesh.mesh2d",
            "spectrum.csv",
            "trajectory.csv",
            "open_loop.csv",
            "gain.json",
            "constraints.json",
            "run.json",
            "deformation/displacement_000.csv",
        ],
    )
    def test_artifacts(self, outcome, artifact):
        assert (outcome.directory / artifact).is_file()

    def test_summary(self, outcome):
        summary = json.loads((outcome.directory / "summary.json").read_text())
        assert summary["N"] >= 1
        assert summary["m"] == 6
        assert summary["control_modes"][0] == "spin"
        assert summary["seed"] == 0
        assert summary["measured_rate"] >= 0.95 * summary["lambda"]
        assert summary["lambda"] == pytest.approx(
            1.5 * abs(summary["leading_eigenvalue"])
        )
        for name in ROBUST_CHECKS:
            assert summary["checks"][name]["passed"], name

    def test_deformation_snapshots(self, outcome):
        snapshots = sorted((outcome.directory / "deformation").glob("*.csv"))
        assert len(snapshots) == 3

    def test_exported_record_parses(self, outcome):
        again = ExperimentConfig.from_yaml_path(outcome.directory / "config.yaml")
        assert again.deformation.snapshots == 3

    def test_invalid_record(self):
        outcome = run_experiment(data_dir / "zero_decay_rate.yaml")
        assert outcome.status == 2
        assert outcome.directory is None
        assert "Stabilization.Decay Rate" in outcome.summary["error"]

    def test_missing_record(self):
        outcome = run_experiment(data_dir / "does_not_exist.yaml")
        assert outcome.status == 2

    def test_eigenmode_index_out_of_range(self, config, tmp_path):
        record = config.with_overrides(
            {
                "Simulation": {
                    "Initial Condition": "eigenmode",
                    "Eigenmode Index": 5000,
                }
            }
        )
        outcome = run_experiment(record, out=tmp_path)
        assert outcome.status == 2
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert "Simulation.Eigenmode Index" in summary["error"]


class TestExperimentStages:
    def test_failures_are_wrapped(self, config, tmp_path):
        experiment = Experiment(config, directory=tmp_path)
        with pytest.raises(StageError) as ex:
            with experiment.stage("spectrum"):
                raise np.linalg.LinAlgError("singular")
        assert ex.value.stage == "spectrum"
        assert isinstance(ex.value.error, np.linalg.LinAlgError)
        assert "spectrum" in experiment.timings

    def test_config_errors_pass_through(self, config, tmp_path):
        experiment = Experiment(config, directory=tmp_path)
        with pytest.raises(ConfigError):
            with experiment.stage("simulation"):
                raise ConfigError("Simulation.Time Step", "must be positive")

    def test_check_records_result(self, config, tmp_path):
        experiment = Experiment(config, directory=tmp_path)
        result = experiment.check("gap", 0.5, 1.0, True)
        assert experiment.checks == [result]
        assert result.to_dict()["passed"] is True


class TestVerify:
    def test_report(self, config, tmp_path):
        outcome = verify(config, out=tmp_path)
        report = json.loads((tmp_path / "verify.json").read_text())
        assert outcome.status in (0, 1)
        assert report["errors"] == {}
        for name in ROBUST_CHECKS + (
            "adjoint_pairing",
            "added_mass_quadratic_form",
            "obstruction_rank",
            "zero_force_work",
            "orthonormality",
            "invariance",
            "superposition",
        ):
            assert report["checks"][name]["passed"], name
        assert report["rank_report"]["controllable"]

    def test_shipped_record_passes(self, tmp_path):
        outcome = verify(cli.default_config(), out=tmp_path)
        failed = [
            name
            for name, check in outcome.summary["checks"].items()
            if not check["passed"]
        ]
        assert failed == []
        assert outcome.status == 0

    def test_invalid_record(self):
        assert verify(data_dir / "missing_mesh_size.yaml").status == 2

    def test_rate_on_the_spectrum(self, config, decomposition, tmp_path):
        record = config.with_overrides(
            {"Stabilization": {"Decay Rate": float(-decomposition.eigenvalues[2])}}
        )
        outcome = verify(record, out=tmp_path)
        assert outcome.status == 1
        assert outcome.summary["errors"]["spectrum"].startswith("LambdaOnSpectrum")
        assert not outcome.summary["checks"]["spectrum_stage"]["passed"]

    def test_single_spin_mode(self, config, subspace, tmp_path):
        record = config.with_overrides(
            {"Stabilization": {"Control Modes": 1, "Mode Family": "tangential"}}
        )
        outcome = verify(record, out=tmp_path)
        rank_report = outcome.summary["rank_report"]
        if subspace.dimension > 1:
            assert not rank_report["controllable"]
            assert rank_report["rank"] < subspace.dimension


class TestSweep:
    def test_control_mode_sweep(self, config, tmp_path):
        outcome = sweep(config, "m=4,6", out=tmp_path)
        record = json.loads((tmp_path / "sweep.json").read_text())
        assert record["parameter"] == "m"
        assert [entry["value"] for entry in record["entries"]] == [4, 6]
        assert [entry["m"] for entry in record["entries"]] == [4, 6]
        assert outcome.status == max(e["status"] for e in record["entries"])
        assert (tmp_path / "m=4" / "summary.json").is_file()

    def test_unknown_parameter(self, config, tmp_path):
        assert sweep(config, "rho=1,2", out=tmp_path).status == 2


def test_summarize_checks():
    checks = [
        CheckResult("a", True, 0.0, 1.0),
        CheckResult("b", False, 2.0, 1.0),
    ]
    assert summarize_checks(checks) == "1 of 2 checks failed: b"
    assert summarize_checks(checks[:1]) == "all 1 checks passed"


def test_configure_logging_installs_one_handler():
    configure_logging(logging.INFO)
    configure_logging(logging.DEBUG)
    handlers = [
        h
        for h in logging.getLogger("fsi_toolbox").handlers
        if any(isinstance(f, StageContextFilter) for f in h.filters)
    ]
    assert len(handlers) == 1
    assert handlers[0].level == logging.DEBUG
    configure_logging(logging.WARNING)


def test_stage_filter_counts_warnings():
    stage_filter = StageContextFilter()
    stage_filter.curr_stage = "deformation"
    record = logging.LogRecord(
        "fsi_toolbox.deformation", logging.WARNING, __file__, 1, "stalled", None, None
    )
    assert stage_filter.filter(record)
    assert record.stage == "deformation"
    assert stage_filter.warnings == {"deformation": 1}
    assert "[deformation] stalled" in StageFormatter().format(record)
    stage_filter.reset()
    assert stage_filter.warnings == {}


class TestCommandLine:
    def test_default_config_is_shipped(self):
        path = cli.default_config()
        assert path.is_file()
        config = ExperimentConfig.from_yaml_path(path)
        assert config.geometry.mesh_size == 0.05

    def test_run(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as ex:
            cli.main(["run", str(data_dir / "experiment.yaml"), "-o", str(tmp_path)])
        assert ex.value.code == 0
        assert "measured rate" in capsys.readouterr().out
        assert (tmp_path / "summary.json").is_file()

    def test_run_names_failed_checks(self, tmp_path, capsys, monkeypatch):
        summary = {
            "lambda": 2.0,
            "N": 1,
            "measured_rate": 1.5,
            "checks": {
                "closed_loop_rate": {"passed": False, "value": 1.5, "threshold": 1.9},
                "kalman_rank": {"passed": True, "value": 1, "threshold": 1},
            },
            "all_checks_passed": False,
        }
        monkeypatch.setattr(
            cli,
            "run_experiment",
            lambda *args, **kwargs: ExperimentOutcome(0, tmp_path, summary),
        )
        with pytest.raises(SystemExit) as ex:
            cli.main(["run", str(data_dir / "experiment.yaml"), "-q"])
        assert ex.value.code == 0
        out = capsys.readouterr().out
        assert "warning: 1 of 2 checks failed: closed_loop_rate" in out

    def test_invalid_record(self):
        with pytest.raises(SystemExit) as ex:
            cli.main(["run", str(data_dir / "zero_decay_rate.yaml"), "-q"])
        assert ex.value.code == 2

    def test_missing_record(self):
        with pytest.raises(SystemExit) as ex:
            cli.main(["verify", str(data_dir / "does_not_exist.yaml"), "-q"])
        assert ex.value.code == 2

    def test_sweep_needs_a_parameter(self):
        with pytest.raises(SystemExit) as ex:
            cli.main(["sweep", str(data_dir / "experiment.yaml")])
        assert ex.value.code == 2
