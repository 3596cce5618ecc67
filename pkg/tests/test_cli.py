import json

import pytest
from click.testing import CliRunner

from eot_stability.cli import main, run
from eot_stability.harness import load_trace

PAIR = {"atoms": [[0.0], [1.0]], "weights": [0.5, 0.5]}
SAMPLED = {
    "source": {"sampler": {"n_atoms": 5, "d": 1}},
    "target": {"sampler": {"n_atoms": 4, "d": 1}},
}


@pytest.fixture
def runner() -> CliRunner:
    return CliRunner()


class TestSolve:
    def test_zero_cost(self, runner, write_config, tmp_path):
        path = write_config(
            {
                "marginals": {"source": PAIR, "target": PAIR},
                "cost": {"kind": "matrix", "matrix": [[0.0, 0.0], [0.0, 0.0]]},
                "epsilons": [1.0],
            }
        )
        out = tmp_path / "out"
        result = runner.invoke(main, ["solve", "-c", str(path), "-o", str(out)])
        assert result.exit_code == 0, result.output
        assert "dual value: 0.0" in result.output
        data = json.loads((out / "solve.json").read_text())
        assert data["converged"] is True
        assert (out / "solve-trace.csv").exists()

    def test_several_epsilons(self, runner, write_config, tmp_path):
        path = write_config({"marginals": SAMPLED, "epsilons": [0.5, 1.0]})
        out = tmp_path / "out"
        result = runner.invoke(main, ["solve", "-c", str(path), "-o", str(out)])
        assert result.exit_code == 0, result.output
        assert (out / "solve-eps=0.5.json").exists()
        assert (out / "solve-eps=1-trace.csv").exists()

    def test_unconverged_exits_1(self, runner, write_config, tmp_path):
        path = write_config({"marginals": SAMPLED, "epsilons": [0.1]})
        result = runner.invoke(
            main, ["solve", "-c", str(path), "-o", str(tmp_path), "--max-iter", "1", "--tol", "1e-14"]
        )
        assert result.exit_code == 1

    def test_invalid_config_exits_2(self, runner, write_config):
        path = write_config({"marginals": SAMPLED, "epsilons": [-1.0]})
        result = runner.invoke(main, ["solve", "-c", str(path)])
        assert result.exit_code == 2
        assert "Invalid config" in result.output
        assert "epsilons" in result.output

    def test_missing_config_file(self, runner, tmp_path):
        result = runner.invoke(main, ["solve", "-c", str(tmp_path / "missing.json")])
        assert result.exit_code == 2


class TestTrace:
    def test_needs_a_single_epsilon(self, runner, write_config, tmp_path):
        path = write_config({"marginals": SAMPLED, "epsilons": [0.5, 1.0]})
        result = runner.invoke(main, ["trace", "-c", str(path), "-o", str(tmp_path)])
        assert result.exit_code == 2

    def test_writes_the_trace(self, runner, write_config, tmp_path):
        path = write_config({"marginals": SAMPLED, "epsilons": [0.5, 1.0]})
        out = tmp_path / "out"
        result = runner.invoke(
            main, ["trace", "-c", str(path), "-o", str(out), "--eps", "1.0", "--format", "json"]
        )
        assert result.exit_code == 0, result.output
        rows = load_trace(out / "trace.json")
        assert rows and rows[-1].converged
        assert {r.metric for r in rows} >= {"entropy_sum", "tv_coupling", "exp_moment"}


class TestSweep:
    def test_writes_reports(self, runner, write_config, tmp_path):
        path = write_config(
            {
                "marginals": SAMPLED,
                "epsilons": [1.0],
                "perturbation": {"mode": "weight-jitter", "schedule": [0.5, 0.25]},
                "metrics": ["tv_coupling", "tv_marginals"],
            }
        )
        out = tmp_path / "out"
        result = runner.invoke(main, ["sweep", "-c", str(path), "-o", str(out), "-j", "2"])
        assert result.exit_code == 0, result.output
        assert "Sweep finished" in result.output
        for name in ("trace.csv", "conditions.csv", "meta.json"):
            assert (out / name).exists()
        assert {r.metric for r in load_trace(out / "trace.csv")} == {"tv_coupling", "tv_marginals"}

    def test_needs_a_perturbation(self, runner, write_config, tmp_path):
        path = write_config({"marginals": SAMPLED, "epsilons": [1.0]})
        result = runner.invoke(main, ["sweep", "-c", str(path), "-o", str(tmp_path)])
        assert result.exit_code == 2

    def test_unconverged_reference_exits_1(self, runner, write_config, tmp_path):
        path = write_config(
            {
                "marginals": SAMPLED,
                "epsilons": [1.0],
                "perturbation": {"mode": "weight-jitter", "schedule": [0.5]},
            }
        )
        result = runner.invoke(
            main, ["sweep", "-c", str(path), "-o", str(tmp_path), "--max-iter", "1", "--tol", "1e-12"]
        )
        assert result.exit_code == 1


class TestOracleAndSelftest:
    def test_oracle_check(self, runner):
        result = runner.invoke(main, ["oracle-check", "--seed", "5", "--instances", "2"])
        assert result.exit_code == 0, result.output
        assert result.output.count("PASS") == 2

    def test_selftest(self, runner):
        result = runner.invoke(main, ["selftest"])
        assert result.exit_code == 0, result.output
        assert "checks passed" in result.output

    def test_run_returns_the_exit_status(self):
        assert run(["oracle-check", "--instances", "0"]) == 2
