import csv
import json
from pathlib import Path

import numpy as np
import pytest

from graspctl import cli, steer
from graspctl.kinematics import builtin_chain_path, load_chain

QP_DUMP = Path(__file__).parent.parent / "src" / "graspctl" / "data" / "qp" / "unit_min.qp"


class TestValidate:
    @pytest.mark.parametrize("name", ["grasp5f", "grasp2f", "reach5f", "apf_demo",
                                      "grasp5f_near"])
    def test_shipped_scenarios_pass(self, name, capsys):
        assert cli.main(["validate", "--scenario", name]) == 0
        assert "ok" in capsys.readouterr().out

    def test_missing_scenario_fails(self, capsys):
        assert cli.main(["validate", "--scenario", "missing.toml"]) == 1
        assert "error" in capsys.readouterr().err


class TestSolve:
    def test_shipped_dump_solves_to_unit_point(self, capsys):
        assert cli.main(["solve", str(QP_DUMP)]) == 0
        out = capsys.readouterr().out
        assert "status: converged" in out
        assert "x: 1.0 1.0" in out

    def test_garbage_input_fails(self, tmp_path, capsys):
        bad = tmp_path / "bad.qp"
        bad.write_text("hello")
        assert cli.main(["solve", str(bad)]) == 1


class TestContour:
    def test_matches_direct_computation(self, tmp_path, capsys):
        out_file = tmp_path / "contour.csv"
        assert cli.main(["contour", "--chain", "one_joint", "--samples", "5",
                         "--angles", "16", "--seed", "3",
                         "--output", str(out_file)]) == 0
        with open(out_file) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["angle", "x", "y"]
        got = np.array([[float(r[1]), float(r[2])] for r in rows[1:]])

        model = load_chain("one_joint")
        rng = np.random.default_rng(3)
        samples = steer.sample_configurations(model, 5, rng)
        expected = steer.velocity_limit_contour(model, samples, "xy", n_angles=16)
        assert np.abs(got - expected).max() < 1e-12


class TestRolloutAndProfile:
    def test_rollout_writes_logs_and_summary(self, tmp_path, capsys):
        out_dir = tmp_path / "out"
        assert cli.main(["rollout", "--scenario", "grasp5f_near", "--policy", "zero",
                         "--episodes", "1", "--seed", "0",
                         "--output", str(out_dir)]) == 0
        summary = json.loads((out_dir / "batch_summary.json").read_text())
        assert summary["episodes"] == 1
        substeps = out_dir / "grasp5f_near_seed0_substeps.csv"
        assert substeps.exists()

        profile_file = tmp_path / "profile.csv"
        assert cli.main(["profile", str(substeps), "--bins", "4",
                         "--output", str(profile_file)]) == 0
        with open(profile_file) as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 5
        assert rows[0][0] == "bin_low"

    def test_unknown_policy_fails(self, tmp_path, capsys):
        assert cli.main(["rollout", "--scenario", "grasp5f_near", "--policy", "flying",
                         "--episodes", "1", "--output", str(tmp_path)]) == 1


def test_builtin_chain_paths_exist():
    for name in ("arm5f", "arm2f", "one_joint"):
        assert builtin_chain_path(name).exists()
