import copy
from pathlib import Path

import pytest

from coupling_lab.profiles import build_constants, constant_profile, shifted_profile
from coupling_lab.scenarios import scenario_from_dict

SCENARIO_DIR = Path(__file__).resolve().parent.parent / "scenarios"

OU_LINEAR = {
    "potential": {"family": "quadratic", "scale": 1.0},
    "perturbation": {"family": "linear", "a": 0.5},
    "sim": {"dt": 0.01, "T": 4.0, "n_paths": 2000, "seed": 42, "d": 1},
    "mode": {"assumptions": "A1-A2prime-uniformly-convex"},
}

COS_SMOOTH_NORM = {
    "potential": {"family": "quadratic_plus_cosine", "amplitude": 1.0},
    "perturbation": {"family": "smooth_norm", "c": 0.5},
    "sim": {"dt": 0.01, "T": 4.0, "n_paths": 2000, "seed": 42, "d": 1},
    "mode": {"assumptions": "A1-A2prime"},
    "constants": {"alpha": 0.0, "C3U": 1.0},
}


def raw_scenario(base, **sections):
    raw = copy.deepcopy(base)
    for name, values in sections.items():
        raw.setdefault(name, {}).update(values)
    return raw


@pytest.fixture
def ou_raw():
    return copy.deepcopy(OU_LINEAR)


@pytest.fixture
def ou_scenario():
    return scenario_from_dict(copy.deepcopy(OU_LINEAR), name="ou_linear")


@pytest.fixture
def ou_zero_scenario():
    raw = copy.deepcopy(OU_LINEAR)
    raw["perturbation"] = {"family": "zero"}
    return scenario_from_dict(raw, name="ou_zero")


@pytest.fixture
def cos_scenario():
    return scenario_from_dict(copy.deepcopy(COS_SMOOTH_NORM), name="cos_smooth_norm")


@pytest.fixture(scope="session")
def unit_constants():
    return build_constants(constant_profile(1.0))


@pytest.fixture(scope="session")
def kappa_bar_constants():
    """Constants of 1 - 2/r: alpha = 1, C1W = 0.5."""
    return build_constants(shifted_profile(1.0, 0.5))
