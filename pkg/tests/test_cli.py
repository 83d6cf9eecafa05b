import json
import os

import numpy as np
import pytest

from gridmarket import GenerateParams, generate_scenario, save_scenario
from gridmarket.cli import main
from gridmarket.scenario import load_scenario, scenario_to_dict

from test_horizon import _hand_scenario


def small_flags(steps=3):
    return [
        "--households", "4", "--batteries", "2", "--heatpumps", "1",
        "--congestion", "1", "--beta", "1000000", "--steps", str(steps),
    ]


class TestGenerateCommand:
    def test_round_trip(self, tmp_path):
        out = tmp_path / "scn.json"
        code = main(["generate", *small_flags(), "--seed", "7", "--out", str(out)])
        assert code == 0
        scn = load_scenario(out)
        params = GenerateParams(households=4, batteries=2, heat_pumps=1,
                                congestion_nodes=1, beta=1e6, steps=3)
        direct, _ = generate_scenario(params, 7)
        assert scenario_to_dict(scn) == scenario_to_dict(direct)

    def test_byte_identical_reruns(self, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        assert main(["generate", *small_flags(), "--seed", "3", "--out", str(a)]) == 0
        assert main(["generate", *small_flags(), "--seed", "3", "--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_degenerate_household_count(self, tmp_path):
        out = tmp_path / "scn.json"
        code = main([
            "generate", "--households", "0", "--batteries", "0",
            "--heatpumps", "0", "--congestion", "0", "--steps", "2",
            "--seed", "1", "--out", str(out),
        ])
        assert code == 0
        assert load_scenario(out).tree.devices == ()

    def test_invalid_counts_exit_1(self, tmp_path, capsys):
        out = tmp_path / "scn.json"
        code = main([
            "generate", "--households", "2", "--batteries", "5",
            "--heatpumps", "0", "--seed", "1", "--out", str(out),
        ])
        assert code == 1
        assert "error" in capsys.readouterr().err


class TestRunCommand:
    def test_feasible_run_exit_0(self, tmp_path):
        scn_path = tmp_path / "scn.json"
        main(["generate", *small_flags(), "--seed", "5", "--out", str(scn_path)])
        out_dir = tmp_path / "out"
        code = main(["run", str(scn_path), "--out", str(out_dir)])
        assert code == 0
        summary = json.loads((out_dir / "summary.json").read_text())
        assert summary["feasible"] is True
        contracts = (out_dir / "contracts.csv").read_text().splitlines()
        assert contracts[0] == "node_id,ptu,watts"
        prices = (out_dir / "prices.csv").read_text().splitlines()
        assert prices[0] == "node_id,ptu,price"

    def test_unsatisfiable_limit_exit_2(self, tmp_path):
        scn, _ = generate_scenario(
            GenerateParams(households=3, batteries=0, heat_pumps=0,
                           congestion_nodes=1, beta=1.0, steps=2,
                           max_iters=40),
            seed=2,
        )
        scn_path = tmp_path / "tight.json"
        save_scenario(scn, scn_path)
        out_dir = tmp_path / "out"
        code = main(["run", str(scn_path), "--out", str(out_dir)])
        assert code == 2
        summary = json.loads((out_dir / "summary.json").read_text())
        assert summary["feasible"] is False
        assert summary["violations"]

    def test_missing_file_exit_1(self, tmp_path, capsys):
        code = main(["run", str(tmp_path / "nope.json"), "--out", str(tmp_path)])
        assert code == 1
        assert "error" in capsys.readouterr().err

    def test_csv_outputs_stable_sorted(self, tmp_path):
        scn_path = tmp_path / "scn.json"
        main(["generate", *small_flags(), "--seed", "5", "--out", str(scn_path)])
        out_dir = tmp_path / "out"
        main(["run", str(scn_path), "--out", str(out_dir)])
        rows = (out_dir / "contracts.csv").read_text().splitlines()[1:]
        keys = [(r.split(",")[0], int(r.split(",")[1])) for r in rows]
        assert keys == sorted(keys)


class TestCompareCommand:
    def test_batch_report_shape(self, tmp_path):
        out_dir = tmp_path / "cmp"
        code = main([
            "compare", "--batch", "3", "--seed", "0", *small_flags(steps=2),
            "--out", str(out_dir),
        ])
        assert code == 0
        report = json.loads((out_dir / "report.json").read_text())
        assert report["instances"] == 3
        assert sum(report["classes"].values()) == 3
        lines = (out_dir / "report.csv").read_text().splitlines()
        assert len(lines) == 4  # header + 3 rows
        box = (out_dir / "boxplot.csv").read_text().splitlines()
        n_feasible = report["classes"]["feasible"]
        assert len(box) == 1 + 3 * n_feasible

    def test_single_scenario_mode(self, tmp_path):
        scn_path = tmp_path / "scn.json"
        main(["generate", *small_flags(steps=2), "--seed", "4", "--out", str(scn_path)])
        out_dir = tmp_path / "cmp"
        assert main(["compare", str(scn_path), "--out", str(out_dir)]) == 0
        report = json.loads((out_dir / "report.json").read_text())
        assert report["instances"] == 1

    def test_usage_error_without_inputs(self, tmp_path, capsys):
        code = main(["compare", "--out", str(tmp_path / "x")])
        assert code == 1

    def test_deterministic_outputs(self, tmp_path):
        args = ["compare", "--batch", "2", "--seed", "1", *small_flags(steps=2)]
        a, b = tmp_path / "a", tmp_path / "b"
        assert main([*args, "--out", str(a)]) == 0
        assert main([*args, "--out", str(b)]) == 0
        for name in ("report.csv", "report.json", "boxplot.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_relax_flag_loosens_limits(self, tmp_path):
        # crush the scenario with a tiny beta, then relax enough to clear it
        scn, _ = generate_scenario(
            GenerateParams(households=2, batteries=1, heat_pumps=0,
                           congestion_nodes=1, beta=0.5, steps=2,
                           max_iters=40),
            seed=3,
        )
        scn_path = tmp_path / "tight.json"
        save_scenario(scn, scn_path)
        tight_dir = tmp_path / "tight"
        relaxed_dir = tmp_path / "relaxed"
        main(["compare", str(scn_path), "--out", str(tight_dir)])
        main(["compare", str(scn_path), "--relax", "1e7", "--out", str(relaxed_dir)])
        tight = json.loads((tight_dir / "report.json").read_text())
        relaxed = json.loads((relaxed_dir / "report.json").read_text())
        assert tight["classes"]["feasible"] == 0
        assert relaxed["classes"]["feasible"] == 1
