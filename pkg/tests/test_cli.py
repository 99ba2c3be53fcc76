import json
import math
from pathlib import Path

import numpy as np
import pytest

from hrlport.cli import main

M, K = 3, 5


def write_prices(path, n_days=180, seed=20240817, gap_in=None):
    """Two-asset CSV: one drifting, one flat-noise asset."""
    rng = np.random.default_rng(seed)
    steps = np.column_stack([rng.normal(0.002, 0.01, size=n_days - 1),
                             rng.normal(0.0, 0.01, size=n_days - 1)])
    logp = np.vstack([np.zeros(2), np.cumsum(steps, axis=0)])
    prices = 100.0 * np.exp(logp)
    dates = np.datetime64("2020-01-01") + np.arange(n_days)
    lines = ["date,AA,BB"]
    for i, date in enumerate(dates):
        aa = f"{prices[i, 0]:.6f}"
        bb = f"{prices[i, 1]:.6f}"
        if gap_in == "BB" and i == 3:
            bb = ""
        lines.append(f"{date},{aa},{bb}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_config(path, data_path, out_dir, *, hidden=(4,), risk_penalty=10.0,
                 n_days=180):
    dates = np.datetime64("2020-01-01") + np.arange(n_days)
    config = {
        "seed": 11,
        "data": str(data_path),
        "out": str(out_dir),
        "env": {
            "n_assets": 2,
            "days_per_period": K,
            "commission_rate": 0.0,
            "cash_borrow_rate": 0.0,
            "stock_borrow_rate": 0.0,
            "risk_penalty": risk_penalty,
        },
        "agent": {"window_periods": M, "hidden": list(hidden),
                  "noise_scale": 0.05, "noise_final": 0.01},
        "train": {
            "steps_per_round_aux": 20, "steps_per_round_exec": 20,
            "minibatch_aux": 8, "minibatch_exec": 8,
            "total_steps_aux": 40, "total_steps_exec": 40,
            "lr_aux": 1.0, "lr_actor": 1e-3, "lr_critic": 1e-3,
            "buffer_capacity": 128,
        },
        "experiments": [
            {"name": "1", "train_start": str(dates[0]),
             "train_end": str(dates[119]), "test_start": str(dates[120]),
             "test_days": 30},
        ],
    }
    path.write_text(json.dumps(config, indent=2), encoding="utf-8")
    return path


@pytest.fixture
def workspace(tmp_path):
    data = write_prices(tmp_path / "prices.csv")
    out = tmp_path / "run"
    config = write_config(tmp_path / "config.json", data, out)
    return {"data": data, "out": out, "config": config, "root": tmp_path}


class TestIngest:
    def test_summary_lists_assets(self, workspace, capsys):
        assert main(["ingest", "--config", str(workspace["config"])]) == 0
        summary = json.loads(
            (workspace["out"] / "ingest_summary.json").read_text())
        assert summary["complete_assets"] == ["AA", "BB"]
        assert summary["rows"] == 180
        assert "2 complete assets" in capsys.readouterr().out
        assert (workspace["out"] / "manifest_ingest.json").exists()

    def test_gap_asset_flagged(self, tmp_path, capsys):
        data = write_prices(tmp_path / "gappy.csv", gap_in="BB")
        out = tmp_path / "run"
        assert main(["ingest", "--data", str(data), "--out", str(out)]) == 0
        summary = json.loads((out / "ingest_summary.json").read_text())
        assert summary["dropped_assets"] == ["BB"]
        assert "dropped" in capsys.readouterr().out

    def test_empty_file_fails(self, tmp_path, capsys):
        empty = tmp_path / "empty.csv"
        empty.write_text("", encoding="utf-8")
        code = main(["ingest", "--data", str(empty), "--out",
                     str(tmp_path / "run")])
        assert code == 1
        assert "error" in capsys.readouterr().err

    def test_manifest_file_requirements(self, tmp_path, capsys):
        data = write_prices(tmp_path / "prices.csv", gap_in="BB")
        manifest = tmp_path / "universe.txt"
        manifest.write_text("AA\nBB\n", encoding="utf-8")
        code = main(["ingest", "--data", str(data), "--out",
                     str(tmp_path / "run"), "--manifest", str(manifest)])
        assert code == 1
        assert "missing data" in capsys.readouterr().err


class TestTrain:
    def test_emits_all_artifacts(self, workspace, capsys):
        assert main(["train", "--config", str(workspace["config"])]) == 0
        exp = workspace["out"] / "exp1"
        assert (exp / "tracking_aux.csv").exists()
        assert (exp / "tracking_exec.csv").exists()
        assert (exp / "checkpoints" / "bundle.json").exists()
        assert (workspace["out"] / "manifest_train.json").exists()
        bundle = json.loads((exp / "checkpoints" / "bundle.json").read_text())
        assert set(bundle["networks"]) == {"aux", "executive", "critic",
                                           "target_actor", "target_critic"}

    def test_same_seed_byte_identical_tracking(self, workspace, tmp_path):
        first = tmp_path / "run_a"
        second = tmp_path / "run_b"
        for out in (first, second):
            assert main(["train", "--config", str(workspace["config"]),
                         "--out", str(out)]) == 0
        for name in ("tracking_aux.csv", "tracking_exec.csv"):
            a = (first / "exp1" / name).read_bytes()
            b = (second / "exp1" / name).read_bytes()
            assert a == b

    def test_invalid_penalty_rejected_before_compute(self, workspace, tmp_path,
                                                     capsys):
        bad = write_config(tmp_path / "bad.json", workspace["data"],
                           tmp_path / "bad_run", risk_penalty=-1.0)
        assert main(["train", "--config", str(bad)]) == 1
        assert "error" in capsys.readouterr().err
        assert not (tmp_path / "bad_run").exists()

    def test_unknown_experiment_rejected(self, workspace, capsys):
        code = main(["train", "--config", str(workspace["config"]),
                     "--experiment", "9"])
        assert code == 1
        assert "no experiment named" in capsys.readouterr().err


class TestBacktest:
    def test_baselines_need_no_checkpoints(self, workspace, capsys):
        assert main(["backtest", "--config", str(workspace["config"]),
                     "--mode", "baselines"]) == 0
        report = (workspace["out"] / "report.csv").read_text()
        assert "UBAH" in report and "CRP" in report
        assert (workspace["out"] / "daily_returns.csv").exists()
        assert (workspace["out"] / "periods_exp1_UBAH.csv").exists()

    def test_full_without_checkpoints_refused(self, workspace, capsys):
        code = main(["backtest", "--config", str(workspace["config"]),
                     "--mode", "full"])
        assert code == 1
        assert "checkpoint" in capsys.readouterr().err

    def test_trained_modes_and_determinism(self, workspace, tmp_path, capsys):
        config = str(workspace["config"])
        assert main(["train", "--config", config]) == 0
        for mode in ("full", "lsv1", "lsv2"):
            assert main(["backtest", "--config", config, "--mode", mode]) == 0
        first = (workspace["out"] / "report.csv").read_bytes()
        assert main(["backtest", "--config", config, "--mode", "lsv2"]) == 0
        second = (workspace["out"] / "report.csv").read_bytes()
        assert first == second

    def test_fingerprint_mismatch_refused(self, workspace, tmp_path, capsys):
        config = str(workspace["config"])
        assert main(["train", "--config", config]) == 0
        other = write_config(tmp_path / "other.json", workspace["data"],
                             workspace["out"], hidden=(5,))
        code = main(["backtest", "--config", str(other), "--mode", "lsv1"])
        assert code == 1
        assert "fingerprint" in capsys.readouterr().err


class TestReport:
    def test_consolidation_best_marking_and_figures(self, workspace, capsys):
        config = str(workspace["config"])
        assert main(["train", "--config", config]) == 0
        assert main(["backtest", "--config", config, "--mode", "baselines"]) == 0
        assert main(["backtest", "--config", config, "--mode", "lsv1"]) == 0
        assert main(["report", str(workspace["out"])]) == 0
        report_dir = workspace["out"] / "report"
        consolidated = report_dir / "consolidated_exp1.csv"
        assert consolidated.exists()
        text = consolidated.read_text()
        assert text.splitlines()[0].endswith("best_in")
        # Successive backtest runs accumulate into one comparison table.
        strategies = {line.split(",")[1] for line in text.splitlines()[1:]}
        assert strategies == {"UBAH", "CRP", "lsv1"}
        figures = report_dir / "figures"
        assert (figures / "cumulative_exp1.png").exists()
        assert (figures / "risk_return_exp1.png").exists()
        assert (figures / "tracking_exp1_aux.png").exists()
        assert (figures / "tracking_exp1_exec.png").exists()
        out = capsys.readouterr().out
        assert "*" in out

    def test_report_without_backtest_fails(self, tmp_path, capsys):
        assert main(["report", str(tmp_path)]) == 1
        assert "report.csv" in capsys.readouterr().err


class TestOutputRootResolution:
    def test_env_var_override(self, workspace, monkeypatch, tmp_path):
        env_out = tmp_path / "from_env"
        monkeypatch.setenv("HRLPORT_OUT", str(env_out))
        assert main(["ingest", "--config", str(workspace["config"])]) == 0
        assert (env_out / "ingest_summary.json").exists()

    def test_flag_beats_env_var(self, workspace, monkeypatch, tmp_path):
        monkeypatch.setenv("HRLPORT_OUT", str(tmp_path / "ignored"))
        flag_out = tmp_path / "from_flag"
        assert main(["ingest", "--config", str(workspace["config"]),
                     "--out", str(flag_out)]) == 0
        assert (flag_out / "ingest_summary.json").exists()
        assert not (tmp_path / "ignored").exists()
