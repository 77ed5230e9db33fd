import argparse
import csv
import json
import logging

import pytest

from coupling_lab.cli import build_parser, main
from coupling_lab.config import build_plan
from coupling_lab.errors import ConfigError

from .conftest import SCENARIO_DIR

OU_ZERO_TOML = """
[potential]
family = "quadratic"
scale = 1.0

[perturbation]
family = "zero"

[sim]
dt = 0.01
T = 2.0
n_paths = 200
seed = 7
d = 1

[mode]
assumptions = "A1-A2prime-uniformly-convex"
"""

OU_LINEAR = str(SCENARIO_DIR / "ou_linear.toml")
FAST = ["--n-paths", "200", "--dt", "0.01"]


def write_scenario(tmp_path, text, name="scenario.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def read_json(path):
    with path.open() as handle:
        return json.load(handle)


def parse(argv):
    return build_parser().parse_args(argv)


class TestMain:
    def test_bounds_on_zero_perturbation(self, tmp_path):
        scenario = write_scenario(tmp_path, OU_ZERO_TOML)
        out = tmp_path / "out"
        assert main(["bounds", "--scenario", scenario, "--out", str(out)]) == 0
        payload = read_json(out / "bounds.json")
        assert payload["lip_S"] == 1.0
        assert payload["lip_T"] == 1.0
        assert (out / "envelopes.csv").exists()

    def test_constants_tables(self, tmp_path):
        scenario = write_scenario(tmp_path, OU_ZERO_TOML)
        assert main(["constants", "--scenario", scenario, "--out", str(tmp_path)]) == 0
        with (tmp_path / "profile_kappa_U.csv").open() as handle:
            assert next(csv.reader(handle)) == ["r", "phi", "Phi", "g", "f", "fprime"]
        payload = read_json(tmp_path / "constants.json")
        assert payload["schema_version"] >= 1
        assert set(payload) >= {"kappa_U", "kappa_bar", "scenario"}

    def test_unknown_key_is_a_config_error(self, tmp_path, caplog):
        scenario = write_scenario(tmp_path, OU_ZERO_TOML.replace("d = 1", "d = 1\nfoo = 2"))
        with caplog.at_level(logging.ERROR):
            assert main(["bounds", "--scenario", scenario, "--out", str(tmp_path)]) == 2
        assert "sim.foo" in caplog.text

    def test_missing_scenario_file(self, tmp_path):
        assert main(["bounds", "--scenario", str(tmp_path / "missing.toml"), "--out", str(tmp_path)]) == 2

    def test_understated_gradient_constant_fails_validation(self, tmp_path):
        text = (SCENARIO_DIR / "ou_linear.toml").read_text() + "\n[constants]\nC1W = 0.1\n"
        scenario = write_scenario(tmp_path, text)
        assert main(["bounds", "--scenario", scenario, "--out", str(tmp_path)]) == 3

    def test_shipped_double_well_exits_on_assumptions(self, tmp_path):
        scenario = str(SCENARIO_DIR / "double_well.toml")
        assert main(["bounds", "--scenario", scenario, "--out", str(tmp_path)]) == 3

    def test_internal_value_error_is_not_a_config_error(self, tmp_path, monkeypatch):
        def broken(plan):
            raise ValueError("shape mismatch")

        monkeypatch.setattr("coupling_lab.cli.run", broken)
        scenario = write_scenario(tmp_path, OU_ZERO_TOML)
        with pytest.raises(ValueError, match="shape mismatch"):
            main(["bounds", "--scenario", scenario, "--out", str(tmp_path)])

    def test_config_error_from_a_runner_exits_2(self, tmp_path, monkeypatch):
        def refuse(plan):
            raise ConfigError("transport maps are built for d <= 2.")

        monkeypatch.setattr("coupling_lab.cli.run", refuse)
        scenario = write_scenario(tmp_path, OU_ZERO_TOML)
        assert main(["transport", "--scenario", scenario, "--out", str(tmp_path)]) == 2

    def test_couple_outputs(self, tmp_path):
        assert main(["couple", "--scenario", OU_LINEAR, "--out", str(tmp_path), *FAST]) == 0
        payload = read_json(tmp_path / "couple.json")
        assert "uncontrolled" in payload
        assert "optimal" in payload
        assert payload["marginal"]["n_reference"] == 10_000
        assert 0.0 <= payload["marginal"]["ks"] <= 1.0
        with (tmp_path / "coupled_paths.csv").open() as handle:
            assert next(csv.reader(handle)) == ["path", "t", "x", "x_hat"]

    def test_transport_outputs(self, tmp_path):
        assert main(["transport", "--scenario", OU_LINEAR, "--out", str(tmp_path), *FAST]) == 0
        payload = read_json(tmp_path / "transport.json")
        assert payload["field"] == "oracle"
        assert payload["converged"] is True
        assert payload["lip_S_emp"] == pytest.approx(1.0, abs=1e-3)
        assert payload["max_map_error"] < 1e-3
        assert payload["ks_pushforward"] < 0.03
        assert (tmp_path / "map.csv").exists()

    def test_verify_is_deterministic(self, tmp_path):
        first, second = tmp_path / "a", tmp_path / "b"
        codes = [main(["verify", "--scenario", OU_LINEAR, "--out", str(out), *FAST]) for out in (first, second)]
        assert codes[0] == codes[1]
        assert codes[0] in (0, 5)
        names = sorted(p.name for p in first.iterdir())
        assert "summary.json" in names
        assert names == sorted(p.name for p in second.iterdir())
        for name in names:
            assert (first / name).read_bytes() == (second / name).read_bytes(), name


class TestBuildPlan:
    @pytest.mark.parametrize(
        "flags",
        [
            ["--seed", "-1"],
            ["--dt", "0"],
            ["--n-paths", "1"],
            ["--tol", "0.1"],
            ["--threads", "0"],
        ],
    )
    def test_rejects_bad_flags(self, flags):
        with pytest.raises(ConfigError):
            build_plan(parse(["bounds", "--scenario", OU_LINEAR, *flags]))

    def test_scenario_is_required(self, monkeypatch):
        monkeypatch.delenv("COUPLING_LAB_SCENARIO", raising=False)
        with pytest.raises(ConfigError, match="--scenario"):
            build_plan(parse(["bounds"]))

    def test_overrides(self):
        plan = build_plan(parse(["couple", "--scenario", OU_LINEAR, "--seed", "3", *FAST]))
        assert plan.overrides == {"seed": 3, "dt": 0.01, "n_paths": 200}
        assert plan.seed == 3
        assert plan.threads is None

    def test_environment_defaults(self, monkeypatch, tmp_path):
        monkeypatch.setenv("COUPLING_LAB_SCENARIO", OU_LINEAR)
        monkeypatch.setenv("COUPLING_LAB_OUT", str(tmp_path))
        monkeypatch.setenv("COUPLING_LAB_SEED", "11")
        plan = build_plan(parse(["bounds"]))
        assert str(plan.scenario) == OU_LINEAR
        assert plan.out == tmp_path
        assert plan.seed == 11

    def test_invalid_seed_env_falls_back(self, monkeypatch, caplog):
        monkeypatch.setenv("COUPLING_LAB_SEED", "seven")
        with caplog.at_level(logging.WARNING):
            plan = build_plan(parse(["bounds", "--scenario", OU_LINEAR]))
        assert plan.seed is None
        assert "Invalid COUPLING_LAB_SEED" in caplog.text

    def test_unknown_command(self):
        args = argparse.Namespace(command="plot", scenario=OU_LINEAR)
        with pytest.raises(ConfigError, match="command"):
            build_plan(args)
