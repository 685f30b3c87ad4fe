"""End-to-end command line checks on small simulated datasets."""

import re

import numpy as np
import pytest

from recurrent_ipw.cli import main
from recurrent_ipw.config import parse_config_text, sim_config_from, study_config_from
from recurrent_ipw.io import read_subjects, read_weights
from recurrent_ipw.pipelines import APPROACHES, MODELS
from recurrent_ipw.study import parse_report


@pytest.fixture(scope="module")
def trial_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_trial")
    cfg = root / "sim.cfg"
    cfg.write_text("n_subjects = 200  # desk-scale trial\n")
    out = root / "data"
    assert main(["simulate", "--config", str(cfg), "--seed", "13", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def weights_csv(trial_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_weights")
    assert main(["weights", "--data", str(trial_dir), "--out", str(out)]) == 0
    return out / "weights.csv"


@pytest.fixture(scope="module")
def study_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_study")
    cfg = root / "study.cfg"
    cfg.write_text(
        "n_subjects = 200\n"
        "n_replicates = 2\n"
        "models = lwyy\n"
        "approaches = hypothetical, treatment_policy, simple_censoring\n"
    )
    out = root / "out"
    assert main(["study", "--config", str(cfg), "--seed", "7", "--out", str(out)]) == 0
    return out


class TestConfigParsing:
    def test_typed_values_with_comments(self):
        text = (
            "# design\n"
            "n_subjects = 400\n"
            "\n"
            "alpha = 0.1   # wide\n"
            "models = lwyy+nb\n"
            "approaches = hypothetical, lwyy_ipw\n"
        )
        opts = parse_config_text(text)
        assert opts == {
            "n_subjects": 400,
            "alpha": 0.1,
            "models": ("lwyy", "nb"),
            "approaches": ("hypothetical", "lwyy_ipw"),
        }

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config key"):
            parse_config_text("subjects = 10\n")

    def test_missing_equals_rejected(self):
        with pytest.raises(ValueError, match="key = value"):
            parse_config_text("n_subjects 10\n")

    def test_cli_overrides_beat_file_values(self):
        cfg = sim_config_from({"seed": 1, "n_subjects": 300}, seed=9, scenario=None)
        assert cfg.seed == 9
        assert cfg.n_subjects == 300
        assert cfg.scenario == 1

    def test_study_options_split_from_sim_options(self):
        cfg = study_config_from(
            {"n_subjects": 250, "n_replicates": 4, "alpha": 0.1},
            seed=2,
            scenario=None,
            measurement_interval=None,
            n_replicates=None,
            bootstrap_B=None,
            threads=None,
        )
        assert cfg.sim.n_subjects == 250
        assert cfg.sim.seed == 2
        assert cfg.n_replicates == 4
        assert cfg.alpha == 0.1
        assert cfg.models == MODELS
        assert cfg.approaches == APPROACHES


class TestSimulate:
    def test_writes_both_worlds(self, trial_dir):
        for world in ("observed", "hypothetical"):
            for name in ("subjects.csv", "events.csv", "tv.csv"):
                assert (trial_dir / world / name).is_file()

    def test_announces_write(self, tmp_path, capsys):
        cfg = tmp_path / "sim.cfg"
        cfg.write_text("n_subjects = 200\n")
        rc = main(["simulate", "--config", str(cfg), "--seed", "13", "--out", str(tmp_path / "d")])
        assert rc == 0
        out = capsys.readouterr().out
        assert re.search(r"wrote 200 subjects \(scenario 1, \d+ switchers\)", out)

    def test_dataset_reads_back(self, trial_dir):
        subjects = read_subjects(str(trial_dir / "observed"))
        assert len(subjects) == 200
        assert len({s.id for s in subjects}) == 200
        assert sum(1 for s in subjects if s.switch_time is not None) == 13

    def test_same_seed_writes_same_bytes(self, trial_dir, tmp_path):
        cfg = tmp_path / "sim.cfg"
        cfg.write_text("n_subjects = 200\n")
        again = tmp_path / "again"
        assert main(["simulate", "--config", str(cfg), "--seed", "13", "--out", str(again)]) == 0
        for world in ("observed", "hypothetical"):
            for name in ("subjects.csv", "events.csv", "tv.csv"):
                assert (again / world / name).read_bytes() == (
                    trial_dir / world / name
                ).read_bytes()


class TestFit:
    def test_fit_prints_coefficient_table(self, trial_dir, capsys):
        rc = main(["fit", "--data", str(trial_dir), "--model", "lwyy", "--approach", "treatment_policy"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "model lwyy, approach treatment_policy" in out
        assert "converged True" in out
        for term in ("arm", "sex", "age", "prior_history"):
            assert term in out

    def test_out_file_mirrors_stdout(self, trial_dir, tmp_path, capsys):
        rc = main(
            [
                "fit",
                "--data", str(trial_dir),
                "--model", "lwyy",
                "--approach", "simple_censoring",
                "--out", str(tmp_path),
            ]
        )
        assert rc == 0
        assert (tmp_path / "fit.txt").read_text() == capsys.readouterr().out

    def test_hypothetical_fit_uses_counterfactual_files(self, trial_dir, capsys):
        rc = main(["fit", "--data", str(trial_dir), "--model", "nb", "--approach", "hypothetical"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "converged True" in out
        assert "phi" in out

    def test_hypothetical_rejected_without_counterfactual(self, trial_dir, capsys):
        rc = main(
            [
                "fit",
                "--data", str(trial_dir / "observed"),
                "--model", "lwyy",
                "--approach", "hypothetical",
            ]
        )
        assert rc == 1
        assert capsys.readouterr().err.startswith("error:")

    def test_weighted_fit_accepts_precomputed_series(self, trial_dir, weights_csv, capsys):
        rc = main(
            [
                "fit",
                "--data", str(trial_dir),
                "--model", "nb",
                "--approach", "naive_nb_ipw",
                "--weights", str(weights_csv),
            ]
        )
        assert rc == 0
        assert "converged True" in capsys.readouterr().out

    def test_model_approach_mismatch_reports_error(self, trial_dir, capsys):
        rc = main(["fit", "--data", str(trial_dir), "--model", "nb", "--approach", "lwyy_ipw"])
        assert rc == 1
        err = capsys.readouterr().err
        assert err.startswith("error:")
        assert "does not apply" in err

    def test_unknown_model_fails_argument_parsing(self, trial_dir, capsys):
        with pytest.raises(SystemExit) as excinfo:
            main(["fit", "--data", str(trial_dir), "--model", "cox", "--approach", "hypothetical"])
        assert excinfo.value.code == 2


class TestWeights:
    def test_series_written_for_every_subject(self, trial_dir, weights_csv):
        series = read_weights(str(weights_csv))
        subjects = read_subjects(str(trial_dir / "observed"))
        assert set(series) == {s.id for s in subjects}
        assert all(len(ws.values) >= 1 for ws in series.values())

    def test_stabilized_by_default(self, weights_csv):
        series = read_weights(str(weights_csv))
        assert any(ws.stabilized for ws in series.values())

    def test_unstabilized_flag(self, trial_dir, tmp_path):
        rc = main(
            ["weights", "--data", str(trial_dir), "--out", str(tmp_path), "--unstabilized"]
        )
        assert rc == 0
        series = read_weights(str(tmp_path / "weights.csv"))
        for ws in series.values():
            assert not ws.stabilized
            assert np.all(ws.values >= 1.0 - 1e-12)
            assert np.all(ws.cum_num == 1.0)


class TestBootstrap:
    def test_reports_point_estimate_and_ci(self, trial_dir, capsys):
        rc = main(
            [
                "bootstrap",
                "--data", str(trial_dir),
                "--estimator", "lwyy_ipw",
                "--bootstrap", "8",
                "--seed", "3",
            ]
        )
        assert rc == 0
        out = capsys.readouterr().out
        assert re.search(
            r"lwyy_ipw: estimate -?\d+\.\d{4}, 95% CI \(-?\d+\.\d{4}, -?\d+\.\d{4}\), "
            r"bootstrap se \d+\.\d{4}, failures 0/8",
            out,
        )

    def test_trace_file_lists_replicates(self, trial_dir, tmp_path, capsys):
        rc = main(
            [
                "bootstrap",
                "--data", str(trial_dir),
                "--estimator", "lwyy",
                "--bootstrap", "6",
                "--seed", "3",
                "--out", str(tmp_path),
            ]
        )
        assert rc == 0
        capsys.readouterr()
        lines = (tmp_path / "bootstrap_trace.csv").read_text().strip().splitlines()
        assert lines[0] == "replicate,estimate,converged"
        assert len(lines) == 7
        for k, line in enumerate(lines[1:]):
            rep, est, conv = line.split(",")
            assert int(rep) == k
            assert conv == "1"
            float(est)

    def test_same_seed_prints_same_line(self, trial_dir, capsys):
        args = [
            "bootstrap",
            "--data", str(trial_dir),
            "--estimator", "lwyy",
            "--bootstrap", "5",
            "--seed", "21",
        ]
        assert main(args) == 0
        first = capsys.readouterr().out
        assert main(args) == 0
        assert capsys.readouterr().out == first


class TestStudy:
    def test_writes_csv_and_text_reports(self, study_dir):
        assert (study_dir / "report.csv").is_file()
        assert (study_dir / "report.txt").is_file()

    def test_report_reflects_config_and_overrides(self, study_dir):
        report = parse_report((study_dir / "report.csv").read_text())
        assert report.meta["seed"] == 7
        assert report.meta["n_replicates"] == 2
        assert report.meta["models"] == "lwyy"
        assert [(r.model, r.approach) for r in report.rows] == [
            ("lwyy", "hypothetical"),
            ("lwyy", "treatment_policy"),
            ("lwyy", "simple_censoring"),
        ]
        for row in report.rows:
            assert row.n_converged == 2

    def test_prints_text_rendering(self, tmp_path, capsys):
        cfg = tmp_path / "study.cfg"
        cfg.write_text(
            "n_subjects = 200\nn_replicates = 1\nmodels = lwyy\napproaches = hypothetical\n"
        )
        out = tmp_path / "out"
        rc = main(["study", "--config", str(cfg), "--seed", "7", "--out", str(out)])
        assert rc == 0
        assert capsys.readouterr().out == (out / "report.txt").read_text()


class TestReport:
    def test_prints_saved_text_rendering(self, study_dir, capsys):
        rc = main(["report", str(study_dir / "report.csv")])
        assert rc == 0
        assert capsys.readouterr().out == (study_dir / "report.txt").read_text()

    def test_csv_format_reproduces_file(self, study_dir, capsys):
        rc = main(["report", str(study_dir / "report.csv"), "--format", "csv"])
        assert rc == 0
        assert capsys.readouterr().out == (study_dir / "report.csv").read_text()

    def test_out_writes_instead_of_printing(self, study_dir, tmp_path, capsys):
        target = tmp_path / "rerendered.txt"
        rc = main(["report", str(study_dir / "report.csv"), "--out", str(target)])
        assert rc == 0
        assert capsys.readouterr().out == ""
        assert target.read_text() == (study_dir / "report.txt").read_text()

    def test_missing_file_reports_error(self, tmp_path, capsys):
        rc = main(["report", str(tmp_path / "nope.csv")])
        assert rc == 1
        assert capsys.readouterr().err.startswith("error:")


class TestErrorHandling:
    def test_missing_dataset_directory(self, tmp_path, capsys):
        rc = main(
            [
                "fit",
                "--data", str(tmp_path / "absent"),
                "--model", "lwyy",
                "--approach", "treatment_policy",
            ]
        )
        assert rc == 1
        assert capsys.readouterr().err.startswith("error:")

    def test_bad_config_key_surfaces_cleanly(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("foo = 1\n")
        rc = main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "d")])
        assert rc == 1
        assert "unknown config key" in capsys.readouterr().err

    def test_subcommand_required(self):
        with pytest.raises(SystemExit) as excinfo:
            main([])
        assert excinfo.value.code == 2
