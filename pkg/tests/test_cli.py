import json

import numpy as np
import pytest

from isgdlab import cli, experiment

BLOB_RUN = [
    "--dataset", "blobs:12:3:2.0",
    "--model", "mlp:3-4-2",
    "--steps", "4",
    "--batch-size", "3",
    "--lr", "0.05",
]


class TestParser:
    def test_requires_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            cli.main([])
        assert exc.value.code == 2

    def test_rejects_unknown_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["celebrate"])
        assert exc.value.code == 2

    def test_rejects_unknown_flag(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["train", "--turbo"])
        assert exc.value.code == 2


class TestConfigFile:
    def test_values_parsed_by_field_type(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text(
            "[run]\n"
            "optimizer = momentum\n"
            "lr = 0.125\n"
            "steps = 6\n"
            "metric_enabled = yes\n"
            "dataset = blobs:12:3:2.0\n"
        )
        values = cli.read_config_file(path)
        assert values == {
            "optimizer": "momentum",
            "lr": 0.125,
            "steps": 6,
            "metric_enabled": True,
            "dataset": "blobs:12:3:2.0",
        }

    def test_missing_file_is_an_error(self, tmp_path):
        assert cli.main(["train", "--config", str(tmp_path / "nope.ini")]) == 2

    def test_needs_run_section(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[tuning]\nlr = 0.1\n")
        assert cli.main(["train", "--config", str(path)]) == 2

    def test_rejects_unknown_key(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[run]\nwarp_speed = 9\n")
        assert cli.main(["train", "--config", str(path)]) == 2

    def test_flags_override_file(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text(
            "[run]\noptimizer = momentum\nsteps = 3\n"
            "dataset = blobs:12:3:2.0\nmodel = mlp:3-4-2\nbatch_size = 3\n"
        )
        out = tmp_path / "art"
        code = cli.main(
            ["train", "--config", str(path), "--steps", "5", "--out", str(out)]
        )
        assert code == 0
        payload = json.loads((out / "run-momentum-uniform-0.json").read_text())
        assert payload["config"]["steps"] == 5
        assert payload["config"]["optimizer"] == "momentum"


class TestTrain:
    def test_writes_record_and_succeeds(self, tmp_path, capsys):
        out = tmp_path / "art"
        code = cli.main(["train", *BLOB_RUN, "--seed", "7", "--out", str(out)])
        assert code == 0
        stdout = capsys.readouterr().out
        assert "final loss" in stdout
        payload = json.loads((out / "run-sgd-uniform-0.json").read_text())
        assert payload["config"]["base_seed"] == 7
        assert len(payload["losses"]) == 5
        assert (out / "train-sgd-uniform-0.txt").exists()

    def test_deterministic_given_seed(self, tmp_path):
        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        cli.main(["train", *BLOB_RUN, "--seed", "3", "--out", str(a_dir)])
        cli.main(["train", *BLOB_RUN, "--seed", "3", "--out", str(b_dir)])
        a = json.loads((a_dir / "run-sgd-uniform-0.json").read_text())
        b = json.loads((b_dir / "run-sgd-uniform-0.json").read_text())
        assert a["losses"] == b["losses"]

    def test_divergence_exits_nonzero(self, capsys):
        with np.errstate(over="ignore", invalid="ignore"):
            code = cli.main(
                ["train", "--dataset", "blobs:12:3:2.0", "--model", "mlp:3-4-2",
                 "--steps", "12", "--batch-size", "3", "--lr", "1e60"]
            )
        assert code == 1
        assert "DIVERGED" in capsys.readouterr().out

    def test_bad_scheme_spelling_exits_nonzero(self, capsys):
        code = cli.main(["train", *BLOB_RUN, "--scheme", "pgn"])
        assert code == 2
        assert "unknown scheme" in capsys.readouterr().err


class TestSweeps:
    def test_reproduce_fig2_writes_bundle(self, tmp_path, capsys):
        out = tmp_path / "fig2"
        code = cli.main(
            ["reproduce-fig2", *BLOB_RUN, "--repetitions", "2", "--seed", "5",
             "--out", str(out)]
        )
        assert code == 0
        assert (out / "curves.csv").exists()
        assert (out / "timing.csv").exists()
        assert (out / "runs" / "adam-gradnorm" / "1.json").exists()
        assert (out / "reproduce-fig2-summary.txt").exists()
        assert "sgd-mix0.5" in capsys.readouterr().out

    def test_timing_table_printed_and_written(self, tmp_path, capsys):
        out = tmp_path / "t"
        code = cli.main(
            ["timing", *BLOB_RUN, "--repetitions", "2", "--out", str(out)]
        )
        assert code == 0
        assert (out / "timing.csv").exists()
        assert "vs uniform" in capsys.readouterr().out

    def test_timing_needs_two_repetitions(self, capsys):
        code = cli.main(["timing", *BLOB_RUN, "--repetitions", "1"])
        assert code == 2
        assert ">= 2" in capsys.readouterr().err


class TestEvalScheme:
    def test_prints_both_divergences(self, tmp_path, capsys):
        out = tmp_path / "m"
        code = cli.main(
            ["eval-scheme", *BLOB_RUN, "--candidate", "gradnorm",
             "--metric-m", "4", "--out", str(out)]
        )
        assert code == 0
        stdout = capsys.readouterr().out
        assert "kl " in stdout
        assert "tv " in stdout
        assert (out / "metric.csv").exists()

    def test_rejects_bad_candidate(self, capsys):
        code = cli.main(["eval-scheme", *BLOB_RUN, "--candidate", "mix:7"])
        assert code == 2
        assert "lie in" in capsys.readouterr().err


class TestChecks:
    def test_speed_check_passes(self, tmp_path, capsys):
        out = tmp_path / "r"
        code = cli.main(["speed-check", "--trials", "5", "--seed", "1",
                         "--out", str(out)])
        assert code == 0
        stdout = capsys.readouterr().out
        assert stdout.count("PASS") == 5
        assert "FAIL" not in stdout
        assert (out / "speed-check-report.txt").exists()

    def test_speed_check_deterministic(self, tmp_path):
        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        cli.main(["speed-check", "--trials", "4", "--seed", "9", "--out", str(a_dir)])
        cli.main(["speed-check", "--trials", "4", "--seed", "9", "--out", str(b_dir)])
        a = (a_dir / "speed-check-report.txt").read_text()
        b = (b_dir / "speed-check-report.txt").read_text()
        assert a == b

    def test_grad_check_passes(self, capsys):
        code = cli.main(["grad-check", "--probes", "2", "--cnn-coords", "20",
                         "--seed", "2"])
        assert code == 0
        stdout = capsys.readouterr().out
        assert "grad-check: PASS" in stdout

    def test_verify_theorem_passes(self, capsys):
        code = cli.main(["verify-theorem", "--trials", "30", "--seed", "3"])
        assert code == 0
        stdout = capsys.readouterr().out
        assert "verify-theorem: PASS" in stdout
        assert "sandwich" in stdout


class TestFetchData:
    def test_packaged_corpus_loads(self, capsys):
        code = cli.main(["fetch-data"])
        assert code == 0
        stdout = capsys.readouterr().out
        assert "2115 items" in stdout
        assert "fetch-data: PASS" in stdout

    def test_missing_corpus_fails_with_hint(self, tmp_path, capsys):
        code = cli.main(["fetch-data", "--data-dir", str(tmp_path / "void")])
        assert code == 1
        assert "ISGDLAB_DATA" in capsys.readouterr().err


class TestResolveRunConfig:
    def test_full_flag_sets_protocol_but_yields_to_flags(self, tmp_path):
        args = cli.build_parser().parse_args(
            ["reproduce-fig2", "--full", "--repetitions", "7"]
        )
        config = cli.resolve_run_config(args)
        assert config.steps == 300
        assert config.repetitions == 7

    def test_seed_maps_to_base_seed(self):
        args = cli.build_parser().parse_args(["train", "--seed", "42"])
        assert cli.resolve_run_config(args).base_seed == 42

    def test_defaults_match_runconfig(self):
        args = cli.build_parser().parse_args(["train"])
        assert cli.resolve_run_config(args) == experiment.RunConfig()
