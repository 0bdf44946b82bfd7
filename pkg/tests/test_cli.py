import csv
import json
from pathlib import Path

import pytest

from qdc.cli import main, read_schedule

BASE_CONFIG = {
    "problem": {"kind": "noisy_qubit", "noise_rate": 0.005, "r_weight": 1.0,
                "q_weight": 10.0, "target": "y"},
    "grid": {"horizon": 1.0, "n_steps": 32, "n_bins": 8},
    "sampling": {"n_traj": 40, "n_is": 6, "window": [[1, 3]]},
    "seed": 7,
}


def write_config(tmp_path, overrides=None, name="config.json"):
    cfg = json.loads(json.dumps(BASE_CONFIG))
    cfg["out_dir"] = str(tmp_path / "out")
    for key, val in (overrides or {}).items():
        if isinstance(val, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(val)
        else:
            cfg[key] = val
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path, cfg


def read_metrics(path):
    lines = Path(path).read_text().splitlines()
    assert lines[0].startswith("# config_hash=")
    rows = list(csv.DictReader(lines[1:]))
    return lines[0], rows


class TestOptimizeCommand:
    def test_outputs_and_schema(self, tmp_path):
        cfg_path, cfg = write_config(tmp_path)
        assert main(["optimize", "--config", str(cfg_path)]) == 0
        out = Path(cfg["out_dir"])
        header, rows = read_metrics(out / "metrics.csv")
        assert len(rows) == 6
        assert list(rows[0]) == ["p", "F_avg", "F_min", "C", "ESS", "D_tilde",
                                 "lambda", "seconds"]
        sched = read_schedule(out / "schedule.json")
        assert sched.pulses.shape == (2, 8)
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"] == cfg
        assert manifest["command"] == "optimize"
        assert header.endswith(manifest["config_hash"])

    def test_bin_mismatch_exits_2_naming_fields(self, tmp_path, capsys):
        cfg_path, _ = write_config(tmp_path, {"grid": {"n_steps": 30, "n_bins": 8}})
        assert main(["optimize", "--config", str(cfg_path)]) == 2
        err = capsys.readouterr().err
        assert "n_bins" in err and "n_steps" in err

    def test_missing_field_exits_2(self, tmp_path, capsys):
        cfg_path, cfg = write_config(tmp_path)
        raw = json.loads(cfg_path.read_text())
        del raw["sampling"]["n_traj"]
        cfg_path.write_text(json.dumps(raw))
        assert main(["optimize", "--config", str(cfg_path)]) == 2
        assert "n_traj" in capsys.readouterr().err

    def test_same_seed_reproduces_everything_but_wall_time(self, tmp_path):
        cfg_path, cfg = write_config(tmp_path)
        out = Path(cfg["out_dir"])
        main(["optimize", "--config", str(cfg_path)])
        first_sched = (out / "schedule.json").read_text()
        _, rows_a = read_metrics(out / "metrics.csv")
        main(["optimize", "--config", str(cfg_path)])
        _, rows_b = read_metrics(out / "metrics.csv")
        for ra, rb in zip(rows_a, rows_b):
            for key in ("p", "F_avg", "F_min", "C", "ESS", "D_tilde", "lambda"):
                assert ra[key] == rb[key]
        assert (out / "schedule.json").read_text() == first_sched

    def test_seed_override_changes_rows(self, tmp_path):
        cfg_path, cfg = write_config(tmp_path)
        main(["optimize", "--config", str(cfg_path), "--out", str(tmp_path / "a")])
        main(["optimize", "--config", str(cfg_path), "--out", str(tmp_path / "b"),
              "--seed", "8"])
        _, rows_a = read_metrics(tmp_path / "a" / "metrics.csv")
        _, rows_b = read_metrics(tmp_path / "b" / "metrics.csv")
        assert rows_a[0]["F_avg"] != rows_b[0]["F_avg"]

    def test_threads_do_not_change_rows(self, tmp_path):
        cfg_path, _ = write_config(tmp_path, {"sampling": {"n_traj": 64}})
        main(["optimize", "--config", str(cfg_path), "--out", str(tmp_path / "a")])
        main(["optimize", "--config", str(cfg_path), "--out", str(tmp_path / "b"),
              "--threads", "3"])
        _, rows_a = read_metrics(tmp_path / "a" / "metrics.csv")
        _, rows_b = read_metrics(tmp_path / "b" / "metrics.csv")
        for ra, rb in zip(rows_a, rows_b):
            assert ra["C"] == rb["C"] and ra["ESS"] == rb["ESS"]

    def test_numerical_abort_exits_3(self, tmp_path, capsys):
        warm = [[1e160] * 8, [1e160] * 8]
        cfg_path, _ = write_config(tmp_path, {
            "sampling": {"n_is": 3, "initial_pulses": warm, "window": [[1, 1]]},
        })
        assert main(["optimize", "--config", str(cfg_path)]) == 3
        assert "iteration 1" in capsys.readouterr().err


class TestAnnealCommand:
    def test_requires_anneal_block(self, tmp_path):
        cfg_path, _ = write_config(tmp_path)
        assert main(["anneal", "--config", str(cfg_path)]) == 2

    def test_noise_staircase_and_manifest(self, tmp_path):
        cfg_path, cfg = write_config(tmp_path, {
            "sampling": {"n_is": 40, "n_traj": 30},
            "anneal": {"d_start": 3e-3, "d_final": 1e-12, "n_steps": 20},
        })
        assert main(["anneal", "--config", str(cfg_path)]) == 0
        out = Path(cfg["out_dir"])
        _, rows = read_metrics(out / "metrics.csv")
        dvals = [float(r["D_tilde"]) for r in rows]
        assert len(set(dvals)) == 20
        assert dvals[0] == pytest.approx(3e-3)
        assert dvals[-1] == pytest.approx(1e-12, rel=1e-6)
        assert all(b <= a for a, b in zip(dvals, dvals[1:]))
        manifest = json.loads((out / "manifest.json").read_text())
        assert "f_closed" in manifest
        assert manifest["final_d_tilde"] == pytest.approx(1e-12, rel=1e-6)


class TestGrapeCommand:
    def test_writes_schedule_and_metrics(self, tmp_path):
        cfg_path, cfg = write_config(tmp_path, {"grape": {"eps0": 0.5, "max_iter": 10}})
        assert main(["grape", "--config", str(cfg_path)]) == 0
        out = Path(cfg["out_dir"])
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["n_iterations"] <= 10
        assert "fidelity" in manifest and "cost" in manifest
        sched = read_schedule(out / "schedule.json")
        assert sched.pulses.shape == (2, 8)


class TestBenchmarkCommand:
    def test_single_run_rows(self, tmp_path):
        cfg_path, cfg = write_config(tmp_path, {
            "sampling": {"n_is": 4, "n_traj": 20},
            "grape": {"eps0": 0.5, "max_iter": 3},
            "benchmark": {"n_runs": 1},
        })
        assert main(["benchmark", "--config", str(cfg_path)]) == 0
        lines = (Path(cfg["out_dir"]) / "benchmark.csv").read_text().splitlines()
        rows = list(csv.DictReader(lines[1:]))
        run_rows = [r for r in rows if r["kind"] == "run"]
        summary = [r for r in rows if r["kind"] == "summary"]
        assert {r["method"] for r in run_rows} == {"qdc", "grape"}
        assert len(run_rows) == 2 and len(summary) == 2

    def test_benchmark_deterministic(self, tmp_path):
        cfg_path, cfg = write_config(tmp_path, {
            "sampling": {"n_is": 3, "n_traj": 15},
            "grape": {"eps0": 0.5, "max_iter": 2},
            "benchmark": {"n_runs": 1},
        })
        out = Path(cfg["out_dir"])
        main(["benchmark", "--config", str(cfg_path)])
        first = (out / "benchmark.csv").read_text()
        main(["benchmark", "--config", str(cfg_path)])
        assert (out / "benchmark.csv").read_text() == first


class TestRobustnessCommand:
    def test_zero_sigma_row_and_round_trip(self, tmp_path):
        cfg_path, cfg = write_config(tmp_path)
        main(["optimize", "--config", str(cfg_path)])
        sched_file = str(Path(cfg["out_dir"]) / "schedule.json")
        cfg_path2, cfg2 = write_config(tmp_path, {
            "robustness": {"sigma_grid": [0.0, 0.1, 0.3], "n_realizations": 20,
                           "schedule_file": sched_file},
        }, name="rob.json")
        assert main(["robustness", "--config", str(cfg_path2),
                     "--out", str(tmp_path / "rob")]) == 0
        lines = (tmp_path / "rob" / "robustness.csv").read_text().splitlines()
        rows = list(csv.DictReader(lines[1:]))
        assert float(rows[0]["max_dC"]) == 0.0
        assert [float(r["sigma"]) for r in rows] == [0.0, 0.1, 0.3]
        # parses back to the same values
        again = list(csv.DictReader(lines[1:]))
        assert again == rows


class TestTransferCommand:
    def test_stages_and_f_closed(self, tmp_path):
        cfg_path, cfg = write_config(tmp_path, {
            "problem": {"noise_rate": 0.05, "r_weight": 0.5,
                        "target": {"haar_seed": 3}},
            "sampling": {"n_is": 8, "n_traj": 30, "window": [[1, 3]]},
            "transfer": {"q_stages": [5, 50], "fidelity_threshold": 0.98},
        })
        assert main(["transfer", "--config", str(cfg_path)]) == 0
        manifest = json.loads((Path(cfg["out_dir"]) / "manifest.json").read_text())
        assert 0.0 <= manifest["f_closed"] <= 1.0
        assert 1 <= len(manifest["stages"]) <= 2
        assert manifest["stages"][0]["q"] == 5.0
