"""End-to-end CLI tests: commands, file outputs, exit codes, determinism."""

import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from ffvd.cli import RUN_FILES, main


def read(path):
    return Path(path).read_bytes()


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--seed", "7", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, synth_dir):
    out = tmp_path_factory.mktemp("run")
    rc = main([
        "fit", "--variant", "ffvd-c-m",
        "--data", str(synth_dir / "data.csv"),
        "--train-len", "120", "--d-x", "1", "--m", "10",
        "--iters", "120", "--burn-in", "60", "--n-samples", "20",
        "--step-size", "0.005", "--seed", "1",
        "--out", str(out),
    ])
    assert rc == 0
    return out


class TestSynth:
    def test_writes_three_files_deterministically(self, synth_dir, tmp_path):
        for name in ("data.csv", "truth_states.csv", "truth_config.json"):
            assert (synth_dir / name).exists()
        again = tmp_path / "again"
        assert main(["synth", "--seed", "7", "--out", str(again)]) == 0
        for name in ("data.csv", "truth_states.csv", "truth_config.json"):
            assert read(synth_dir / name) == read(again / name)

    def test_truth_config_records_generating_constants(self, synth_dir):
        cfg = json.loads((synth_dir / "truth_config.json").read_text())
        assert cfg["signal_variance"] == 2.0
        assert cfg["lengthscale"] == 0.5
        assert cfg["M"] == 20 and cfg["T"] == 120

    def test_missing_out_is_usage_error(self, capsys):
        assert main(["synth", "--seed", "1"]) == 1


class TestFit:
    def test_run_directory_contents(self, run_dir):
        for name in RUN_FILES:
            assert (run_dir / name).exists(), name

    def test_unknown_variant_lists_choices(self, synth_dir, tmp_path, capsys):
        rc = main([
            "fit", "--variant", "bogus", "--data", str(synth_dir / "data.csv"),
            "--train-len", "120", "--out", str(tmp_path / "x"),
        ])
        assert rc == 1
        err = capsys.readouterr().err
        for variant in ("ffvd-m", "ffvd-c-m", "ffvd-p"):
            assert variant in err

    def test_byte_identical_rerun(self, synth_dir, run_dir, tmp_path):
        again = tmp_path / "again"
        rc = main([
            "fit", "--variant", "ffvd-c-m",
            "--data", str(synth_dir / "data.csv"),
            "--train-len", "120", "--d-x", "1", "--m", "10",
            "--iters", "120", "--burn-in", "60", "--n-samples", "20",
            "--step-size", "0.005", "--seed", "1",
            "--out", str(again),
        ])
        assert rc == 0
        assert read(run_dir / "trace.csv") == read(again / "trace.csv")
        assert read(run_dir / "samples_states.csv") == read(again / "samples_states.csv")
        assert read(run_dir / "samples_inducing.csv") == read(again / "samples_inducing.csv")

    def test_rerun_from_config_reproduces_trace(self, run_dir, tmp_path):
        again = tmp_path / "fromcfg"
        rc = main([
            "fit", "--config", str(run_dir / "config.json"), "--out", str(again),
        ])
        assert rc == 0
        assert read(run_dir / "trace.csv") == read(again / "trace.csv")

    def test_missing_data_is_data_error(self, tmp_path):
        rc = main([
            "fit", "--variant", "ffvd-m", "--data", str(tmp_path / "none.csv"),
            "--train-len", "10", "--out", str(tmp_path / "y"),
        ])
        assert rc == 2

    def test_seed_fanout(self, synth_dir, tmp_path, monkeypatch):
        monkeypatch.setenv("FFVD_THREADS", "2")
        out = tmp_path / "fan"
        rc = main([
            "fit", "--variant", "ffvd-c-m",
            "--data", str(synth_dir / "data.csv"),
            "--train-len", "120", "--d-x", "1", "--m", "6",
            "--iters", "40", "--burn-in", "20", "--n-samples", "5",
            "--step-size", "0.005", "--seeds", "1..3",
            "--out", str(out),
        ])
        assert rc == 0
        for seed in (1, 2, 3):
            for name in RUN_FILES:
                assert (out / f"seed-{seed}" / name).exists()

    def test_fanout_seed_matches_single_seed_run(self, synth_dir, tmp_path):
        out = tmp_path / "fan2"
        main([
            "fit", "--variant", "ffvd-c-m", "--data", str(synth_dir / "data.csv"),
            "--train-len", "120", "--d-x", "1", "--m", "6",
            "--iters", "40", "--burn-in", "20", "--n-samples", "5",
            "--step-size", "0.005", "--seeds", "2..2", "--out", str(out),
        ])
        single = tmp_path / "single2"
        main([
            "fit", "--variant", "ffvd-c-m", "--data", str(synth_dir / "data.csv"),
            "--train-len", "120", "--d-x", "1", "--m", "6",
            "--iters", "40", "--burn-in", "20", "--n-samples", "5",
            "--step-size", "0.005", "--seed", "2", "--out", str(single),
        ])
        assert read(out / "seed-2" / "trace.csv") == read(single / "trace.csv")


class TestPredict:
    def test_default_horizon_row_count(self, run_dir):
        rc = main(["predict", "--run", str(run_dir), "--seed", "3"])
        assert rc == 0
        lines = (run_dir / "pred.csv").read_text().strip().splitlines()
        assert lines[0] == "t,dim,mean,std"
        assert len(lines) - 1 == 30  # horizon 30 x d_y = 1

    def test_zero_horizon_usage_error(self, run_dir):
        assert main(["predict", "--run", str(run_dir), "--horizon", "0"]) == 1

    def test_deterministic_given_seed(self, run_dir, tmp_path):
        a = tmp_path / "a.csv"
        b = tmp_path / "b.csv"
        main(["predict", "--run", str(run_dir), "--seed", "5", "--out", str(a)])
        main(["predict", "--run", str(run_dir), "--seed", "5", "--out", str(b)])
        assert read(a) == read(b)

    def test_missing_run_artifacts(self, tmp_path):
        assert main(["predict", "--run", str(tmp_path)]) == 2


class TestEval:
    def test_perfect_predictions_score_zero(self, synth_dir, run_dir, tmp_path, capsys):
        # overwrite pred.csv with the ground-truth observations
        import csv

        ds_rows = (synth_dir / "data.csv").read_text().strip().splitlines()[1:]
        cfg = json.loads((run_dir / "config.json").read_text())
        lo = cfg["train_len"]
        with open(run_dir / "pred.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "dim", "mean", "std"])
            for h in range(30):
                w.writerow([lo + 1 + h, 0, ds_rows[lo + h], "1.0"])
        rc = main(["eval", "--run", str(run_dir)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "0.000000" in out
        metrics = json.loads((run_dir / "metrics.json").read_text())
        assert metrics["rmse"] == 0.0
        assert metrics["horizon"] == 30
        assert metrics["variant"] == "ffvd-c-m"

    def test_constant_offset_scores_offset(self, synth_dir, run_dir, capsys):
        import csv

        ds_rows = (synth_dir / "data.csv").read_text().strip().splitlines()[1:]
        cfg = json.loads((run_dir / "config.json").read_text())
        lo = cfg["train_len"]
        with open(run_dir / "pred.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "dim", "mean", "std"])
            for h in range(30):
                w.writerow([lo + 1 + h, 0, repr(float(ds_rows[lo + h]) + 0.25), "1.0"])
        main(["eval", "--run", str(run_dir)])
        out = capsys.readouterr().out
        assert "0.250000" in out

    def test_multi_seed_mean_std_format(self, synth_dir, tmp_path, capsys):
        out = tmp_path / "fan3"
        main([
            "fit", "--variant", "ffvd-c-m", "--data", str(synth_dir / "data.csv"),
            "--train-len", "120", "--d-x", "1", "--m", "6",
            "--iters", "40", "--burn-in", "20", "--n-samples", "5",
            "--step-size", "0.005", "--seeds", "1..2", "--out", str(out),
        ])
        for seed in (1, 2):
            main(["predict", "--run", str(out / f"seed-{seed}"), "--seed", "9"])
        rc = main(["eval", "--runs-root", str(out), "--seeds", "1..2"])
        assert rc == 0
        line = capsys.readouterr().out.strip().splitlines()[-1]
        assert "±" in line
        metrics = json.loads((out / "metrics.json").read_text())
        assert set(metrics["per_seed"]) == {"1", "2"}


class TestNormtest:
    def test_normality_outputs(self, run_dir, capsys):
        rc = main(["normtest", "--run", str(run_dir)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "rejection fraction" in out
        lines = (run_dir / "normality.csv").read_text().strip().splitlines()
        assert lines[0] == "quantity,t_or_m,dim,k2,p"
        n_states = sum(1 for l in lines[1:] if l.startswith("state"))
        n_ind = sum(1 for l in lines[1:] if l.startswith("inducing"))
        assert n_states == 121  # one row per (t, dim)
        assert n_ind == 10     # one row per (m, dim)

    def test_too_few_draws_is_error(self, synth_dir, tmp_path):
        out = tmp_path / "tiny"
        main([
            "fit", "--variant", "ffvd-c-m", "--data", str(synth_dir / "data.csv"),
            "--train-len", "120", "--d-x", "1", "--m", "6",
            "--iters", "40", "--burn-in", "20", "--n-samples", "5",
            "--step-size", "0.005", "--seed", "1", "--out", str(out),
        ])
        assert main(["normtest", "--run", str(out)]) == 2


class TestEntryPoint:
    def test_console_script_usage(self):
        proc = subprocess.run(
            [sys.executable, "-m", "ffvd.cli"], capture_output=True, text=True
        )
        assert proc.returncode == 1

    def test_unknown_command(self):
        assert main(["frobnicate"]) == 1


class TestResolvedDefaults:
    def test_fit_defaults_match_standard_settings(self):
        from ffvd.cli import _resolved_fit_config, build_parser

        args = build_parser().parse_args([
            "fit", "--variant", "ffvd-m", "--data", "d.csv", "--train-len", "10",
            "--out", "x",
        ])
        cfg = _resolved_fit_config(args)
        assert cfg["d_x"] == 4
        assert cfg["M"] == 100
        assert cfg["iters"] == 50000
        assert cfg["n_samples"] == 100
        assert cfg["adam_lr"] == 0.01
        assert cfg["adam_decay"] == 0.05
        assert cfg["step_size"] == 0.01
        assert cfg["friction"] == 0.05
