import importlib
import logging
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from .errors import AssumptionError, ConfigError, MembershipError
from .grids import DEFAULT_BOX_HALF_WIDTH, POINTS_PER_AXIS, validation_grid
from .profiles import profile_grid, profile_of_potential

logger = logging.getLogger(__name__)

ASSUMPTION_MODES = ("A1-A2", "A1-A2prime", "A1-A2prime-uniformly-convex")
MODE_REQUIREMENTS = {
    "A1-A2": ("C2U",),
    "A1-A2prime": ("alpha", "C3U"),
    "A1-A2prime-uniformly-convex": ("alpha", "C3U"),
}
MODE_CASES = {
    "A1-A2": ("A2", "Thm2.3-i"),
    "A1-A2prime": ("A2prime", "Thm2.3-ii"),
    "A1-A2prime-uniformly-convex": ("A2prime-positive-alpha", "Thm2.3-eq2"),
}
POTENTIAL_KEYS = {
    "quadratic": {"scale"},
    "quadratic_plus_cosine": {"amplitude"},
    "double_well": {"a", "b"},
    "custom": {"factory", "params"},
}
PERTURBATION_KEYS = {
    "zero": set(),
    "linear": {"a"},
    "smooth_norm": {"c"},
    "tanh_ridge": {"c", "s"},
    "custom": {"factory", "params"},
}
SECTIONS = {"potential", "perturbation", "sim", "mode", "constants", "couple"}
CONSTANT_KEYS = ("C2U", "alpha", "C3U", "C1W")
SLACK = 1e-9

Field = Callable[[np.ndarray], np.ndarray]


def as_points(x, dim: int) -> np.ndarray:
    """Coerce scalars, 1-d arrays (when dim == 1) and (..., dim) arrays to shape (n, dim)."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        return np.full((1, dim), float(arr))
    if arr.ndim == 1:
        if dim == 1:
            return arr[:, None]
        if arr.shape[0] == dim:
            return arr[None, :]
    if arr.shape[-1] != dim:
        raise ValueError(f"points have trailing dimension {arr.shape[-1]}, expected {dim}.")
    return arr.reshape(-1, dim)


@dataclass(frozen=True, eq=False)
class PotentialSpec:
    family: str
    dim: int
    value: Field
    grad: Field
    hess: Optional[Field] = None
    C2U: Optional[float] = None
    alpha: Optional[float] = None
    C3U: Optional[float] = None
    profile: Optional[Callable[[np.ndarray], np.ndarray]] = None
    params: Dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class PerturbationSpec:
    family: str
    dim: int
    value: Field
    grad: Field
    C1W: float
    params: Dict[str, Any] = field(default_factory=dict)

    @property
    def is_zero(self) -> bool:
        return self.family == "zero"


def quadratic(scale: float = 1.0, dim: int = 1) -> PotentialSpec:
    s = float(scale)
    eye = np.eye(dim)
    return PotentialSpec(
        family="quadratic",
        dim=dim,
        value=lambda x: 0.5 * s * np.sum(x * x, axis=-1),
        grad=lambda x: s * x,
        hess=lambda x: np.broadcast_to(s * eye, x.shape[:-1] + (dim, dim)).copy(),
        C2U=abs(s),
        alpha=s,
        C3U=0.0,
        profile=lambda r: np.full(np.shape(r), s),
        params={"scale": s},
    )


def quadratic_plus_cosine(amplitude: float = 1.0, dim: int = 1) -> PotentialSpec:
    A = float(amplitude)
    eye = np.eye(dim)
    profile = None
    if dim == 1:
        profile = lambda r: 1.0 - 2.0 * abs(A) * np.abs(np.sin(r / 2.0)) / r
    return PotentialSpec(
        family="quadratic_plus_cosine",
        dim=dim,
        value=lambda x: 0.5 * np.sum(x * x, axis=-1) + A * np.sum(np.cos(x), axis=-1),
        grad=lambda x: x - A * np.sin(x),
        hess=lambda x: eye - A * np.cos(x)[..., :, None] * eye,
        C2U=1.0 + abs(A),
        alpha=1.0 - abs(A),
        C3U=abs(A),
        profile=profile,
        params={"amplitude": A},
    )


def double_well(a: float = 1.0, b: float = 1.0, dim: int = 1) -> PotentialSpec:
    a = float(a)
    b = float(b)
    eye = np.eye(dim)

    def hess(x: np.ndarray) -> np.ndarray:
        sq = np.sum(x * x, axis=-1)[..., None, None]
        return (a * sq - b) * eye + 2.0 * a * x[..., :, None] * x[..., None, :]

    profile = None
    if dim == 1:
        profile = lambda r: a * r * r / 4.0 - b
    return PotentialSpec(
        family="double_well",
        dim=dim,
        value=lambda x: a * np.sum(x * x, axis=-1) ** 2 / 4.0 - b * np.sum(x * x, axis=-1) / 2.0,
        grad=lambda x: (a * np.sum(x * x, axis=-1, keepdims=True) - b) * x,
        hess=hess,
        alpha=-b,
        profile=profile,
        params={"a": a, "b": b},
    )


def _direction_vector(a, dim: int) -> np.ndarray:
    if np.ndim(a) == 0:
        vec = np.zeros(dim)
        vec[0] = float(a)
        return vec
    vec = np.asarray(a, dtype=float)
    if vec.shape != (dim,):
        raise ValueError(f"vector of length {dim} expected, got shape {vec.shape}.")
    return vec


def zero_perturbation(dim: int = 1) -> PerturbationSpec:
    return PerturbationSpec(
        family="zero",
        dim=dim,
        value=lambda x: np.zeros(x.shape[:-1]),
        grad=lambda x: np.zeros_like(x),
        C1W=0.0,
    )


def linear(a=0.5, dim: int = 1) -> PerturbationSpec:
    vec = _direction_vector(a, dim)
    return PerturbationSpec(
        family="linear",
        dim=dim,
        value=lambda x: x @ vec,
        grad=lambda x: np.broadcast_to(vec, x.shape).copy(),
        C1W=float(np.linalg.norm(vec)),
        params={"a": vec},
    )


def smooth_norm(c: float = 0.5, dim: int = 1) -> PerturbationSpec:
    c = float(c)
    return PerturbationSpec(
        family="smooth_norm",
        dim=dim,
        value=lambda x: c * np.sqrt(1.0 + np.sum(x * x, axis=-1)),
        grad=lambda x: c * x / np.sqrt(1.0 + np.sum(x * x, axis=-1, keepdims=True)),
        C1W=abs(c),
        params={"c": c},
    )


def tanh_ridge(c: float = 0.5, s: float = 1.0, dim: int = 1) -> PerturbationSpec:
    c = float(c)
    s = float(s)

    def grad(x: np.ndarray) -> np.ndarray:
        out = np.zeros_like(x)
        out[..., 0] = c * s / np.cosh(s * x[..., 0]) ** 2
        return out

    return PerturbationSpec(
        family="tanh_ridge",
        dim=dim,
        value=lambda x: c * np.tanh(s * x[..., 0]),
        grad=grad,
        C1W=abs(c * s),
        params={"c": c, "s": s},
    )


POTENTIAL_FAMILIES = {
    "quadratic": quadratic,
    "quadratic_plus_cosine": quadratic_plus_cosine,
    "double_well": double_well,
}
PERTURBATION_FAMILIES = {
    "zero": lambda dim: zero_perturbation(dim),
    "linear": linear,
    "smooth_norm": smooth_norm,
    "tanh_ridge": tanh_ridge,
}


def load_factory(reference: str) -> Callable[..., Any]:
    module_name, sep, attr = reference.partition(":")
    if not sep or not module_name or not attr:
        raise ConfigError(f"factory must look like 'module:callable', got {reference!r}.")
    try:
        module = importlib.import_module(module_name)
        return getattr(module, attr)
    except (ImportError, AttributeError) as exc:
        raise ConfigError(f"cannot load factory {reference!r}: {exc}") from exc


@dataclass(frozen=True)
class SimParams:
    dt: float
    horizon: float
    n_paths: int
    seed: int
    dim: int = 1


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    potential: PotentialSpec
    perturbation: PerturbationSpec
    sim: SimParams
    assumption_mode: str
    couple: Dict[str, Any] = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.sim.dim

    @property
    def hessian_case(self) -> str:
        return MODE_CASES[self.assumption_mode][0]

    @property
    def lipschitz_case(self) -> str:
        return MODE_CASES[self.assumption_mode][1]


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _number(section: Mapping[str, Any], key: str, where: str, default: Any = None, integer: bool = False):
    if key not in section:
        if default is None:
            raise ConfigError(f"missing key {where}.{key}")
        return default
    value = section[key]
    if integer:
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{where}.{key} must be an integer, got {value!r}")
        return value
    if not _is_number(value):
        raise ConfigError(f"{where}.{key} must be a number, got {value!r}")
    return float(value)


def _vector_or_number(section: Mapping[str, Any], key: str, where: str, default: Any):
    if key not in section:
        return default
    value = section[key]
    if _is_number(value):
        return float(value)
    if isinstance(value, list) and value and all(_is_number(v) for v in value):
        return [float(v) for v in value]
    raise ConfigError(f"{where}.{key} must be a number or a list of numbers, got {value!r}")


def _check_keys(section: Mapping[str, Any], allowed, where: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown key {where}.{key}")


def _build_potential(section: Mapping[str, Any], dim: int) -> PotentialSpec:
    family = section.get("family")
    if family not in POTENTIAL_KEYS:
        raise ConfigError(f"potential.family must be one of {sorted(POTENTIAL_KEYS)}, got {family!r}")
    params = {k: v for k, v in section.items() if k != "family"}
    _check_keys(params, POTENTIAL_KEYS[family], "potential")
    if family == "custom":
        factory = load_factory(str(params.get("factory", "")))
        spec = factory(dim=dim, **dict(params.get("params", {})))
        if not isinstance(spec, PotentialSpec):
            raise ConfigError("potential.factory must return a PotentialSpec")
        return spec
    kwargs = {key: _number(params, key, "potential") for key in params}
    try:
        return POTENTIAL_FAMILIES[family](dim=dim, **kwargs)
    except ValueError as exc:
        raise ConfigError(f"potential: {exc}") from exc


def _build_perturbation(section: Mapping[str, Any], dim: int) -> PerturbationSpec:
    family = section.get("family")
    if family not in PERTURBATION_KEYS:
        raise ConfigError(f"perturbation.family must be one of {sorted(PERTURBATION_KEYS)}, got {family!r}")
    params = {k: v for k, v in section.items() if k != "family"}
    _check_keys(params, PERTURBATION_KEYS[family], "perturbation")
    if family == "custom":
        factory = load_factory(str(params.get("factory", "")))
        spec = factory(dim=dim, **dict(params.get("params", {})))
        if not isinstance(spec, PerturbationSpec):
            raise ConfigError("perturbation.factory must return a PerturbationSpec")
        return spec
    if family == "linear":
        kwargs = {"a": _vector_or_number(params, "a", "perturbation", None)}
        if kwargs["a"] is None:
            raise ConfigError("missing key perturbation.a")
    else:
        kwargs = {key: _number(params, key, "perturbation") for key in params}
    try:
        return PERTURBATION_FAMILIES[family](dim=dim, **kwargs)
    except ValueError as exc:
        raise ConfigError(f"perturbation: {exc}") from exc


def _section(raw: Mapping[str, Any], name: str, required: bool = True) -> Mapping[str, Any]:
    if name not in raw:
        if required:
            raise ConfigError(f"missing section [{name}]")
        return {}
    value = raw[name]
    if not isinstance(value, dict):
        raise ConfigError(f"[{name}] must be a table")
    return value


def apply_overrides(sim: SimParams, overrides: Optional[Mapping[str, Any]]) -> SimParams:
    if not overrides:
        return sim
    changes: Dict[str, Any] = {}
    for key, value in overrides.items():
        if value is None:
            continue
        if key == "seed":
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise ConfigError(f"override seed must be a non-negative integer, got {value!r}")
            changes["seed"] = value
        elif key == "dt":
            if not _is_number(value) or value <= 0:
                raise ConfigError(f"override dt must be positive, got {value!r}")
            changes["dt"] = float(value)
        elif key == "n_paths":
            if not isinstance(value, int) or isinstance(value, bool) or value < 2:
                raise ConfigError(f"override n_paths must be an integer >= 2, got {value!r}")
            changes["n_paths"] = value
        else:
            raise ConfigError(f"unknown override {key!r}")
    return replace(sim, **changes)


def scenario_from_dict(raw: Mapping[str, Any], name: str = "scenario", overrides: Optional[Mapping[str, Any]] = None) -> Scenario:
    for key in raw:
        if key not in SECTIONS:
            raise ConfigError(f"unknown section [{key}]")
    sim_raw = _section(raw, "sim")
    _check_keys(sim_raw, {"dt", "T", "n_paths", "seed", "d"}, "sim")
    sim = SimParams(
        dt=_number(sim_raw, "dt", "sim"),
        horizon=_number(sim_raw, "T", "sim"),
        n_paths=_number(sim_raw, "n_paths", "sim", integer=True),
        seed=_number(sim_raw, "seed", "sim", integer=True),
        dim=_number(sim_raw, "d", "sim", default=1, integer=True),
    )
    if sim.dt <= 0:
        raise ConfigError("sim.dt must be positive")
    if sim.horizon <= 0:
        raise ConfigError("sim.T must be positive")
    if sim.n_paths < 2:
        raise ConfigError("sim.n_paths must be at least 2")
    if sim.seed < 0:
        raise ConfigError("sim.seed must be non-negative")
    if sim.dim < 1:
        raise ConfigError("sim.d must be at least 1")
    sim = apply_overrides(sim, overrides)

    potential = _build_potential(_section(raw, "potential"), sim.dim)
    perturbation = _build_perturbation(_section(raw, "perturbation"), sim.dim)

    mode_raw = _section(raw, "mode")
    _check_keys(mode_raw, {"assumptions"}, "mode")
    mode = mode_raw.get("assumptions")
    if mode not in ASSUMPTION_MODES:
        raise ConfigError(f"mode.assumptions must be one of {list(ASSUMPTION_MODES)}, got {mode!r}")

    constants = _section(raw, "constants", required=False)
    _check_keys(constants, set(CONSTANT_KEYS), "constants")
    declared = {key: _number(constants, key, "constants") for key in constants}
    if "C1W" in declared:
        if declared["C1W"] < 0:
            raise ConfigError("constants.C1W must be non-negative")
        perturbation = replace(perturbation, C1W=declared.pop("C1W"))
    if declared:
        potential = replace(potential, **declared)

    couple_raw = _section(raw, "couple", required=False)
    _check_keys(couple_raw, {"x0", "xhat0"}, "couple")
    couple = {
        "x0": _vector_or_number(couple_raw, "x0", "couple", 0.0),
        "xhat0": _vector_or_number(couple_raw, "xhat0", "couple", 1.0),
    }
    return Scenario(
        name=name,
        potential=potential,
        perturbation=perturbation,
        sim=sim,
        assumption_mode=mode,
        couple=couple,
    )


def load_scenario(path, overrides: Optional[Mapping[str, Any]] = None) -> Scenario:
    path = Path(path)
    try:
        with path.open("rb") as handle:
            raw = tomllib.load(handle)
    except FileNotFoundError as exc:
        raise ConfigError(f"scenario file {path} not found") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    scenario = scenario_from_dict(raw, name=path.stem, overrides=overrides)
    logger.info(
        "Loaded scenario %s: U=%s W=%s d=%s mode=%s",
        scenario.name,
        scenario.potential.family,
        scenario.perturbation.family,
        scenario.dim,
        scenario.assumption_mode,
    )
    return scenario


@dataclass(frozen=True)
class CheckOutcome:
    name: str
    passed: bool
    detail: str
    witness: Optional[Tuple[float, ...]] = None

    def as_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "passed": self.passed,
            "detail": self.detail,
            "witness": None if self.witness is None else list(self.witness),
        }


@dataclass
class ValidationReport:
    scenario: str
    grid_points: int
    checks: List[CheckOutcome] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    @property
    def failures(self) -> List[CheckOutcome]:
        return [check for check in self.checks if not check.passed]

    def check(self, name: str) -> CheckOutcome:
        for item in self.checks:
            if item.name == name:
                return item
        raise KeyError(name)

    def raise_for_failures(self) -> None:
        if self.passed:
            return
        lines = [f"{c.name}: {c.detail}" + (f" at {list(c.witness)}" if c.witness else "") for c in self.failures]
        raise AssumptionError(f"Scenario {self.scenario} failed validation: " + "; ".join(lines))

    def as_dict(self) -> Dict[str, Any]:
        return {
            "scenario": self.scenario,
            "grid_points": self.grid_points,
            "spot_check": True,
            "passed": self.passed,
            "checks": [c.as_dict() for c in self.checks],
        }


def _evaluate(name: str, fn: Callable[..., Any], *args) -> np.ndarray:
    try:
        return np.asarray(fn(*args), dtype=float)
    except Exception as exc:
        raise AssumptionError(f"callback {name} failed on the validation grid: {exc}") from exc


def _witness(points: np.ndarray, index: int) -> Tuple[float, ...]:
    return tuple(float(v) for v in points[index])


def validate_scenario(
    scenario: Scenario,
    grid: Optional[np.ndarray] = None,
    r_grid: Optional[np.ndarray] = None,
    seed: int = 0,
) -> ValidationReport:
    """Spot-check the declared assumptions of a scenario on a validation grid."""
    pot = scenario.potential
    pert = scenario.perturbation
    points = validation_grid(scenario.dim, seed=seed) if grid is None else as_points(grid, scenario.dim)
    report = ValidationReport(scenario=scenario.name, grid_points=len(points))
    add = report.checks.append

    grad_u = _evaluate("potential.grad", pot.grad, points)
    bad = np.nonzero(~np.all(np.isfinite(grad_u), axis=-1))[0]
    add(
        CheckOutcome("grad_finite", True, "grad U finite on the grid")
        if bad.size == 0
        else CheckOutcome("grad_finite", False, "grad U not finite", _witness(points, int(bad[0])))
    )

    grad_w = _evaluate("perturbation.grad", pert.grad, points)
    pure = np.array_equal(grad_u, _evaluate("potential.grad", pot.grad, points)) and np.array_equal(
        grad_w, _evaluate("perturbation.grad", pert.grad, points)
    )
    add(CheckOutcome("purity", pure, "repeated evaluation is bitwise identical" if pure else "callbacks are not pure"))

    missing = [key for key in MODE_REQUIREMENTS[scenario.assumption_mode] if getattr(pot, key) is None]
    if missing:
        add(CheckOutcome("declared_constants", False, f"mode {scenario.assumption_mode} needs {', '.join(missing)}"))
    elif scenario.assumption_mode.endswith("uniformly-convex") and not pot.alpha > 0:
        add(CheckOutcome("declared_constants", False, f"uniformly convex mode needs alpha > 0, got {pot.alpha}"))
    else:
        add(CheckOutcome("declared_constants", True, "required constants declared"))

    needs_hessian = scenario.assumption_mode != "A1-A2" or pot.C2U is not None
    if pot.hess is None:
        add(CheckOutcome("hessian", not needs_hessian, "no Hessian callback supplied"))
    else:
        H = _evaluate("potential.hess", pot.hess, points)
        scale = 1.0 + np.max(np.abs(H))
        asym = np.max(np.abs(H - np.swapaxes(H, -1, -2)))
        add(CheckOutcome("hess_symmetric", bool(asym <= 1e-10 * scale), f"max asymmetry {asym:.3g}"))
        eig = np.linalg.eigvalsh(0.5 * (H + np.swapaxes(H, -1, -2)))
        spectral = np.max(np.abs(eig), axis=-1)
        k = int(np.argmax(spectral))
        if pot.C2U is None:
            passed = scenario.assumption_mode != "A1-A2"
            add(CheckOutcome("A2", passed, f"sup |<u, hess U u>| = {spectral[k]:.6g}; no C2U declared", _witness(points, k)))
        else:
            passed = bool(spectral[k] <= pot.C2U * (1 + SLACK) + SLACK)
            add(
                CheckOutcome(
                    "A2",
                    passed,
                    f"sup |<u, hess U u>| = {spectral[k]:.6g} vs C2U = {pot.C2U:.6g}",
                    None if passed else _witness(points, k),
                )
            )
        if pot.alpha is not None:
            lowest = np.min(eig, axis=-1)
            k = int(np.argmin(lowest))
            passed = bool(lowest[k] >= pot.alpha - SLACK * (1 + abs(pot.alpha)))
            add(
                CheckOutcome(
                    "A2prime_alpha",
                    passed,
                    f"inf <u, hess U u> = {lowest[k]:.6g} vs alpha = {pot.alpha:.6g}",
                    None if passed else _witness(points, k),
                )
            )
        if pot.C3U is not None:
            rng = np.random.default_rng([seed, 3])
            step = 2.0 * DEFAULT_BOX_HALF_WIDTH / (POINTS_PER_AXIS - 1)
            units = rng.standard_normal(points.shape)
            units /= np.linalg.norm(units, axis=-1, keepdims=True)
            shifted = _evaluate("potential.hess", pot.hess, points + step * units)
            gap = np.max(np.abs(np.linalg.eigvalsh(shifted - H)), axis=-1) / step
            k = int(np.argmax(gap))
            passed = bool(gap[k] <= pot.C3U * (1 + SLACK) + SLACK)
            add(
                CheckOutcome(
                    "A2prime_C3U",
                    passed,
                    f"max Hessian difference quotient {gap[k]:.6g} vs C3U = {pot.C3U:.6g}",
                    None if passed else _witness(points, k),
                )
            )

    norms = np.linalg.norm(grad_w, axis=-1)
    k = int(np.argmax(norms))
    passed = bool(norms[k] <= pert.C1W * (1 + SLACK) + SLACK)
    add(
        CheckOutcome(
            "A1_W_lipschitz",
            passed,
            f"sup |grad W| = {norms[k]:.6g} vs C1W = {pert.C1W:.6g}",
            None if passed else _witness(points, k),
        )
    )

    try:
        profile_of_potential(pot, profile_grid(2.0 * DEFAULT_BOX_HALF_WIDTH, 96) if r_grid is None else r_grid)
        add(CheckOutcome("A1_profile_in_K", True, "convexity profile of U is in class K"))
    except MembershipError as exc:
        add(CheckOutcome("A1_profile_in_K", False, str(exc)))

    for failure in report.failures:
        logger.warning("Validation of %s failed %s: %s", scenario.name, failure.name, failure.detail)
    return report


@dataclass(frozen=True, eq=False)
class OracleBundle:
    """Exact value field for U = s|x|^2/2 and W = <a, x>.

    phi_t(x) = <a, x> e^{-s(T-t)} - |a|^2 (1 - e^{-2s(T-t)}) / (2s), S_t(x) = x + a (1 - e^{-st}) / s
    and T(x) = x - a / s.
    """

    a: np.ndarray
    scale: float
    horizon: float
    dim: int

    def _tau(self, t: float) -> float:
        return self.horizon - t

    def phi(self, t: float, x) -> np.ndarray:
        s, tau = self.scale, self._tau(t)
        x = as_points(x, self.dim)
        a2 = float(self.a @ self.a)
        return (x @ self.a) * math.exp(-s * tau) - a2 * (1.0 - math.exp(-2.0 * s * tau)) / (2.0 * s)

    def grad(self, t: float, x) -> np.ndarray:
        x = as_points(x, self.dim)
        return np.broadcast_to(self.a * math.exp(-self.scale * self._tau(t)), x.shape).copy()

    def hess(self, t: float, x) -> np.ndarray:
        x = as_points(x, self.dim)
        return np.zeros(x.shape + (self.dim,))

    def laplacian(self, t: float, x) -> np.ndarray:
        return np.zeros(len(as_points(x, self.dim)))

    def dphi_dt(self, t: float, x) -> np.ndarray:
        s, tau = self.scale, self._tau(t)
        x = as_points(x, self.dim)
        a2 = float(self.a @ self.a)
        return s * (x @ self.a) * math.exp(-s * tau) + a2 * math.exp(-2.0 * s * tau)

    def hjb_residual(self, t: float, x) -> np.ndarray:
        x = as_points(x, self.dim)
        g = self.grad(t, x)
        drift = np.sum(self.scale * x * g, axis=-1)
        return self.dphi_dt(t, x) + self.laplacian(t, x) - drift - np.sum(g * g, axis=-1)

    def flow_field(self, tau: float, x) -> np.ndarray:
        return self.grad(self.horizon - tau, x)

    def flow(self, tau: float, x) -> np.ndarray:
        x = as_points(x, self.dim)
        return x + self.a * (1.0 - math.exp(-self.scale * tau)) / self.scale

    def transport(self, x) -> np.ndarray:
        return as_points(x, self.dim) - self.a / self.scale

    def inverse_transport(self, x) -> np.ndarray:
        return as_points(x, self.dim) + self.a / self.scale

    def controlled_mean(self, t: float, u: float, x0) -> np.ndarray:
        """Mean at time u of the optimally controlled dynamics started from x0 at time t."""
        s, T = self.scale, self.horizon
        x0 = as_points(x0, self.dim)
        decay = math.exp(-s * (u - t))
        return x0 * decay - (self.a / s) * (math.exp(-s * (T - u)) - math.exp(-s * (T + u - 2.0 * t)))

    def costate(self, u: float) -> np.ndarray:
        return self.a * math.exp(-self.scale * (self.horizon - u))


def closed_form_oracle(scenario: Scenario, horizon: Optional[float] = None) -> Optional[OracleBundle]:
    pot, pert = scenario.potential, scenario.perturbation
    if pot.family != "quadratic" or pert.family not in ("linear", "zero"):
        return None
    scale = float(pot.params.get("scale", 1.0))
    if scale <= 0:
        return None
    a = np.zeros(scenario.dim) if pert.is_zero else np.asarray(pert.params["a"], dtype=float)
    return OracleBundle(a=a, scale=scale, horizon=scenario.sim.horizon if horizon is None else horizon, dim=scenario.dim)
