"""Flow maps S_t of the fields grad V_tau = grad phi_{T - tau} and the transport map T = S^-1."""
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Callable, List, Optional, Tuple

import numpy as np
from scipy import integrate, stats
from scipy.integrate import IntegrationWarning
from scipy.interpolate import PchipInterpolator

from .bounds import BoundInputs, gradient_envelope, hessian_envelope_tau
from .errors import BoundError, TransportError
from .grids import step_count
from .scenarios import Scenario, as_points
from .sde import simulate_langevin, simulate_optimal_dynamics
from .streams import keyed_generator

logger = logging.getLogger(__name__)

DEFAULT_TOL_FLOW = 1e-5
DEFAULT_GRADIENT_THRESHOLD = 1e-4
DEFAULT_T_MAX_CAP = 12.0
DUMP_TIME_SLICES = 101
CDF_NODES = 2001
KS_COEFFICIENT = 1.36
MAP_HEADER = ("x", "S(x)", "T(x)")

Field = Callable[[float, np.ndarray], np.ndarray]


def flow_field_of(provider) -> Field:
    """grad V_tau(x) for a value provider; tau is flow time, t = horizon - tau is control time."""
    direct = getattr(provider, "flow_field", None)
    if direct is not None:
        return direct
    return lambda tau, x: provider.grad(provider.horizon - tau, x)


def _evaluate(fn: Field, tau: float, x: np.ndarray) -> np.ndarray:
    try:
        out = np.asarray(fn(tau, x), dtype=float).reshape(x.shape)
    except TransportError:
        raise
    except Exception as exc:
        raise TransportError(f"field evaluation failed at tau={tau:.6g}: {exc}") from exc
    if not np.all(np.isfinite(out)):
        raise TransportError(f"field is not finite at tau={tau:.6g}")
    return out


def rk4_step(fn: Field, tau: float, x: np.ndarray, h: float) -> np.ndarray:
    k1 = _evaluate(fn, tau, x)
    k2 = _evaluate(fn, tau + 0.5 * h, x + 0.5 * h * k1)
    k3 = _evaluate(fn, tau + 0.5 * h, x + 0.5 * h * k2)
    k4 = _evaluate(fn, tau + h, x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_path(fn: Field, x: np.ndarray, tau0: float, tau1: float, ode_dt: float) -> np.ndarray:
    """Integrate dx/dtau = fn(tau, x) from tau0 to tau1 (either direction) in equal RK4 steps."""
    span = tau1 - tau0
    n = step_count(abs(span), ode_dt)
    if n == 0:
        return x.copy()
    h = span / n
    for k in range(n):
        x = rk4_step(fn, tau0 + k * h, x, h)
    return x


@dataclass(frozen=True, eq=False)
class FlowMap:
    anchors: np.ndarray
    times: np.ndarray
    trajectories: np.ndarray
    converged: bool
    tol_flow: float
    ode_dt: float
    T_max: float
    vector_field: Field = field(repr=False)
    truncation_factor: float = 1.0

    @property
    def dim(self) -> int:
        return self.anchors.shape[1]

    @property
    def terminal(self) -> np.ndarray:
        return self.trajectories[-1]

    def slice_at(self, tau: float) -> np.ndarray:
        """Anchor positions at flow time tau, linear between recorded slices."""
        if not 0.0 <= tau <= self.T_max + 1e-12:
            raise ValueError(f"tau={tau} lies outside [0, {self.T_max:.6g}].")
        if len(self.times) == 1:
            return self.trajectories[0]
        k = min(int(np.searchsorted(self.times, tau, side="right")) - 1, len(self.times) - 2)
        w = (tau - self.times[k]) / (self.times[k + 1] - self.times[k])
        return (1.0 - w) * self.trajectories[k] + w * self.trajectories[k + 1]

    def header(self) -> Tuple[str, ...]:
        names = ["x_S"] if self.dim == 1 else [f"x_S{i + 1}" for i in range(self.dim)]
        return ("t", "anchor", *names)

    def rows(self, slices: int = DUMP_TIME_SLICES) -> List[Tuple[float, ...]]:
        stride = max(1, int(math.ceil((len(self.times) - 1) / max(1, slices - 1))))
        keep = list(range(0, len(self.times), stride))
        if keep[-1] != len(self.times) - 1:
            keep.append(len(self.times) - 1)
        return [
            (float(self.times[k]), j, *map(float, self.trajectories[k, j]))
            for k in keep
            for j in range(len(self.anchors))
        ]


def integrate_flow(
    scenario: Scenario,
    value_provider,
    anchors,
    T_max: float,
    ode_dt: float,
    tol_flow: float = DEFAULT_TOL_FLOW,
) -> FlowMap:
    """RK4 trajectories of dS/dtau = grad V_tau(S), S_0 = Id, for every anchor.

    The flow is flagged converged when the last two slices differ by less than tol_flow in
    sup norm. In 1-d anchors must stay ordered; a crossing means ode_dt is too large.
    """
    if T_max < 0 or ode_dt <= 0:
        raise ValueError("need T_max >= 0 and ode_dt > 0.")
    x = as_points(anchors, scenario.dim).copy()
    if not np.all(np.isfinite(x)):
        raise ValueError("anchors must be finite.")
    order = np.argsort(x[:, 0]) if scenario.dim == 1 else None
    fn = flow_field_of(value_provider)
    if scenario.perturbation.is_zero:
        fn = lambda tau, pts: np.zeros_like(pts)
    n = step_count(T_max, ode_dt)
    h = T_max / n if n else ode_dt
    trajectories = np.empty((n + 1,) + x.shape)
    trajectories[0] = x
    for k in range(n):
        tau = k * h
        x = rk4_step(fn, tau, x, h)
        if order is not None and np.any(np.diff(x[order, 0]) <= 0):
            raise TransportError(f"anchors crossed at tau={tau + h:.6g}; reduce ode_dt (now {h:.3g}).")
        trajectories[k + 1] = x
    change = float(np.max(np.abs(trajectories[-1] - trajectories[-2]))) if n else 0.0
    flow = FlowMap(
        anchors=trajectories[0].copy(),
        times=np.arange(n + 1) * h,
        trajectories=trajectories,
        converged=change < tol_flow,
        tol_flow=tol_flow,
        ode_dt=h,
        T_max=T_max,
        vector_field=fn,
    )
    logger.info(
        "Integrated %s anchors to tau=%.6g (step %.3g); last-slice change %.3g, converged=%s.",
        len(x),
        T_max,
        h,
        change,
        flow.converged,
    )
    return flow


@dataclass(frozen=True, eq=False)
class MonotoneMap:
    """1-d increasing map through (nodes, values), linear past the ends with the edge slopes."""

    nodes: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        if np.any(np.diff(self.nodes) <= 0) or np.any(np.diff(self.values) <= 0):
            raise TransportError("map slice is not strictly increasing; cannot invert.")
        object.__setattr__(self, "_interp", PchipInterpolator(self.nodes, self.values, extrapolate=False))

    @property
    def domain(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.array([self.nodes[0]]), np.array([self.nodes[-1]])

    def __call__(self, x) -> np.ndarray:
        pts = as_points(x, 1)[:, 0]
        out = self._interp(np.clip(pts, self.nodes[0], self.nodes[-1]))
        lo_slope = (self.values[1] - self.values[0]) / (self.nodes[1] - self.nodes[0])
        hi_slope = (self.values[-1] - self.values[-2]) / (self.nodes[-1] - self.nodes[-2])
        out = np.where(pts < self.nodes[0], self.values[0] + lo_slope * (pts - self.nodes[0]), out)
        out = np.where(pts > self.nodes[-1], self.values[-1] + hi_slope * (pts - self.nodes[-1]), out)
        return out[:, None]

    def inverse(self) -> "MonotoneMap":
        return MonotoneMap(self.values, self.nodes)


@dataclass(frozen=True, eq=False)
class FlowEvaluator:
    """S (forward) or T (reverse) for d > 1 by integrating the frozen field from any point."""

    vector_field: Field
    T_max: float
    ode_dt: float
    reverse: bool
    lower: np.ndarray
    upper: np.ndarray

    @property
    def domain(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.lower, self.upper

    def __call__(self, x) -> np.ndarray:
        pts = as_points(x, len(self.lower))
        if self.reverse:
            return rk4_path(self.vector_field, pts, self.T_max, 0.0, self.ode_dt)
        return rk4_path(self.vector_field, pts, 0.0, self.T_max, self.ode_dt)


def extract_transport_maps(flow: FlowMap):
    """(S, T): S is the terminal flow, T its inverse. T pushes mu forward to nu."""
    if not flow.converged:
        raise TransportError(
            f"flow has not converged at T_max={flow.T_max:.6g} (tol {flow.tol_flow:.3g}); increase T_max."
        )
    if flow.dim == 1:
        order = np.argsort(flow.anchors[:, 0])
        S = MonotoneMap(flow.anchors[order, 0], flow.terminal[order, 0])
        return S, S.inverse()
    lo, hi = flow.anchors.min(axis=0), flow.anchors.max(axis=0)
    S = FlowEvaluator(flow.vector_field, flow.T_max, flow.ode_dt, False, lo, hi)
    T = FlowEvaluator(flow.vector_field, flow.T_max, flow.ode_dt, True, flow.terminal.min(axis=0), flow.terminal.max(axis=0))
    return S, T


def map_rows(S, T, points) -> List[Tuple[float, float, float]]:
    pts = as_points(points, 1)
    return [(float(x), float(s), float(t)) for x, s, t in zip(pts[:, 0], S(pts)[:, 0], T(pts)[:, 0])]


@dataclass(frozen=True, eq=False)
class TargetDensity:
    """Unnormalised density exp(log_density(x)) restricted to the box [lower, upper]."""

    log_density: Callable[[np.ndarray], np.ndarray]
    lower: np.ndarray
    upper: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.lower)

    def density(self, x: np.ndarray) -> np.ndarray:
        return np.exp(self.log_density(as_points(x, self.dim)))


def target_density(scenario: Scenario, half_width: float = 12.0) -> TargetDensity:
    """nu proportional to exp(-U - W)."""
    pot, pert = scenario.potential, scenario.perturbation
    box = np.full(scenario.dim, half_width)
    return TargetDensity(lambda x: -pot.value(x) - pert.value(x), -box, box)


def source_density(scenario: Scenario, half_width: float = 12.0) -> TargetDensity:
    """mu proportional to exp(-U)."""
    pot = scenario.potential
    box = np.full(scenario.dim, half_width)
    return TargetDensity(lambda x: -pot.value(x), -box, box)


def _cdf_1d(target: TargetDensity) -> Tuple[np.ndarray, np.ndarray]:
    edges = np.linspace(target.lower[0], target.upper[0], CDF_NODES)
    masses = np.empty(len(edges) - 1)
    with warnings.catch_warnings():
        warnings.simplefilter("error", IntegrationWarning)
        try:
            for i, (a, b) in enumerate(zip(edges[:-1], edges[1:])):
                masses[i], _ = integrate.quad(lambda s: float(target.density(np.array([[s]]))[0]), a, b)
        except IntegrationWarning as exc:
            raise TransportError(f"density normalisation quadrature failed: {exc}") from exc
    total = masses.sum()
    if not (total > 0 and math.isfinite(total)):
        raise TransportError(f"density normalisation is not a positive number: {total!r}.")
    return edges, np.concatenate([[0.0], np.cumsum(masses) / total])


def _marginals_2d(target: TargetDensity, nodes: int = 401):
    axes = [np.linspace(target.lower[i], target.upper[i], nodes) for i in range(2)]
    mesh = np.meshgrid(*axes, indexing="ij")
    dens = target.density(np.stack([m.ravel() for m in mesh], axis=-1)).reshape(mesh[0].shape)
    total = integrate.trapezoid(integrate.trapezoid(dens, axes[1], axis=1), axes[0])
    if not (total > 0 and math.isfinite(total)):
        raise TransportError(f"density normalisation is not a positive number: {total!r}.")
    dens = dens / total
    cdfs = []
    for i in range(2):
        marginal = integrate.trapezoid(dens, axes[1 - i], axis=1 - i)
        cdf = integrate.cumulative_trapezoid(marginal, axes[i], initial=0.0)
        cdfs.append((axes[i], cdf / cdf[-1]))
    mean = [integrate.trapezoid(integrate.trapezoid(dens * m, axes[1], axis=1), axes[0]) for m in mesh]
    second = lambda f: integrate.trapezoid(integrate.trapezoid(dens * f, axes[1], axis=1), axes[0])
    cov = second((mesh[0] - mean[0]) * (mesh[1] - mean[1]))
    var0 = second((mesh[0] - mean[0]) ** 2)
    var1 = second((mesh[1] - mean[1]) ** 2)
    return cdfs, float(cov / math.sqrt(var0 * var1))


@dataclass(frozen=True)
class PushforwardReport:
    ks: float
    pvalue: float
    n: int
    marginal_ks: Tuple[float, ...] = ()
    correlation_gap: Optional[float] = None

    @property
    def noise_level(self) -> float:
        return KS_COEFFICIENT / math.sqrt(self.n)


def gaussian_sampler(mean, std: float = 1.0) -> Callable[[int, int], np.ndarray]:
    mean = np.atleast_1d(np.asarray(mean, dtype=float))

    def sample(n: int, seed: int) -> np.ndarray:
        # three-word key keeps this apart from the (seed, i) path streams
        rng = keyed_generator(seed, 0, 1)
        return mean + std * rng.standard_normal((n, len(mean)))

    return sample


def langevin_sampler(scenario: Scenario, horizon: float = 10.0, dt: Optional[float] = None) -> Callable[[int, int], np.ndarray]:
    """mu-samples as end points of long unperturbed Langevin runs started at the origin."""

    def sample(n: int, seed: int) -> np.ndarray:
        ensemble = simulate_langevin(
            scenario, np.zeros(scenario.dim), horizon, dt=dt, seed=seed, n_paths=n, record_times=(horizon,)
        )
        return ensemble.at(horizon)

    return sample


def pushforward_check(mapping, source_sampler, target: TargetDensity, n: int, seed: int = 0) -> PushforwardReport:
    """KS distance between mapping(source samples) and the target law (per marginal in 2-d)."""
    if target.dim > 2:
        raise ValueError("pushforward checks are limited to d <= 2.")
    samples = np.asarray(mapping(source_sampler(n, seed)), dtype=float).reshape(n, target.dim)
    if target.dim == 1:
        edges, cdf = _cdf_1d(target)
        result = stats.kstest(samples[:, 0], lambda v: np.interp(v, edges, cdf))
        report = PushforwardReport(float(result.statistic), float(result.pvalue), n)
    else:
        cdfs, rho = _marginals_2d(target)
        marginal = [
            stats.kstest(samples[:, i], lambda v, ax=ax, c=c: np.interp(v, ax, c)) for i, (ax, c) in enumerate(cdfs)
        ]
        ks_values = tuple(float(r.statistic) for r in marginal)
        k = int(np.argmax(ks_values))
        rho_hat = float(np.corrcoef(samples[:, 0], samples[:, 1])[0, 1])
        report = PushforwardReport(ks_values[k], float(marginal[k].pvalue), n, ks_values, abs(rho_hat - rho))
    logger.info("Pushforward KS = %.4g at n=%s (noise level %.4g).", report.ks, n, report.noise_level)
    return report


def intermediate_pushforward_check(
    flow: FlowMap,
    scenario: Scenario,
    value_field,
    tau: float,
    mu_samples,
    nu_samples,
    dt: Optional[float] = None,
    seed: Optional[int] = None,
) -> PushforwardReport:
    """Two-sample KS between S_tau applied to nu-samples and controlled simulation to flow time tau.

    Optimally controlled paths started from mu-samples at time 0 have law mu_tau at control time
    T_max - tau, which the flow at tau must reproduce. 1-d only.
    """
    if flow.dim != 1:
        raise ValueError("intermediate pushforward checks are 1-d.")
    nodes = flow.anchors[:, 0]
    order = np.argsort(nodes)
    S_tau = MonotoneMap(nodes[order], flow.slice_at(tau)[order, 0])
    mapped = S_tau(nu_samples)[:, 0]
    mu = as_points(mu_samples, 1)
    horizon = value_field.horizon
    end = horizon - tau
    if end <= 0:
        simulated = mu[:, 0]
    else:
        dt = scenario.sim.dt if dt is None else dt
        ensemble = simulate_optimal_dynamics(
            scenario, value_field, mu, (0.0, end), dt=dt, seed=seed, n_paths=len(mu), record_times=(end,)
        )
        simulated = ensemble.states[-1][:, 0]
    result = stats.ks_2samp(mapped, simulated)
    return PushforwardReport(float(result.statistic), float(result.pvalue), min(len(mapped), len(simulated)))


def probe_pairs(anchors, n_random: int = 2000, seed: int = 0, interior: float = 0.98) -> np.ndarray:
    """Adjacent-anchor pairs (1-d) plus seeded random pairs inside a shrunken anchor hull, shape (p, 2, d)."""
    pts = np.asarray(anchors, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    centre, half = 0.5 * (lo + hi), 0.5 * (hi - lo) * interior
    rng = np.random.default_rng([seed, 11])
    a = centre + half * rng.uniform(-1.0, 1.0, size=(n_random, pts.shape[1]))
    b = centre + half * rng.uniform(-1.0, 1.0, size=(n_random, pts.shape[1]))
    pairs = [np.stack([a, b], axis=1)]
    if pts.shape[1] == 1:
        sorted_pts = np.sort(pts[:, 0])
        inside = sorted_pts[(sorted_pts >= centre[0] - half[0]) & (sorted_pts <= centre[0] + half[0])]
        pairs.append(np.stack([inside[:-1], inside[1:]], axis=1)[:, :, None])
    return np.concatenate(pairs, axis=0)


def empirical_lipschitz(mapping, probes, hull: Optional[Tuple[Any, Any]] = None) -> float:
    """max |map(x) - map(y)| / |x - y| over probe pairs: a lower bound on the Lipschitz constant."""
    pairs = np.asarray(probes, dtype=float)
    if pairs.ndim == 2:
        pairs = pairs[:, :, None]
    if pairs.ndim != 3 or pairs.shape[1] != 2:
        raise ValueError("probes must have shape (p, 2) or (p, 2, d).")
    x, y = pairs[:, 0], pairs[:, 1]
    hull = hull if hull is not None else getattr(mapping, "domain", None)
    if hull is not None:
        lo, hi = (np.asarray(v, dtype=float) for v in hull)
        tol = 1e-12 * (1.0 + np.abs(hi - lo))
        outside = np.any((x < lo - tol) | (x > hi + tol) | (y < lo - tol) | (y > hi + tol), axis=1)
        if np.any(outside):
            k = int(np.nonzero(outside)[0][0])
            raise TransportError(f"probe pair {k} lies outside the anchor hull [{lo.tolist()}, {hi.tolist()}].")
    gaps = np.linalg.norm(x - y, axis=1)
    keep = gaps > 0
    if not np.any(keep):
        raise ValueError("probe pairs must contain distinct points.")
    fx = np.asarray(mapping(x[keep]), dtype=float).reshape(x[keep].shape)
    fy = np.asarray(mapping(y[keep]), dtype=float).reshape(y[keep].shape)
    return float(np.max(np.linalg.norm(fx - fy, axis=1) / gaps[keep]))


def _integrate_rate(fn: Callable[[float], float], what: str) -> float:
    with warnings.catch_warnings():
        warnings.simplefilter("error", IntegrationWarning)
        try:
            head, _ = integrate.quad(lambda u: 2.0 * u * fn(u * u), 0.0, 1.0, limit=400, epsabs=1e-12, epsrel=1e-10)
            tail, _ = integrate.quad(fn, 1.0, math.inf, limit=400, epsabs=1e-12, epsrel=1e-10)
        except IntegrationWarning as exc:
            raise TransportError(f"integral of {what} diverges or did not converge: {exc}") from exc
    total = head + tail
    if not math.isfinite(total):
        raise TransportError(f"integral of {what} is not finite.")
    return total


def hessian_envelope_to_lipschitz(
    lambda_max: Callable[[float], float],
    lambda_min: Callable[[float], float],
) -> Tuple[float, float]:
    """(exp int_0^inf lambda_max, exp -int_0^inf lambda_min) for the flow map S and its inverse T."""
    upper = _integrate_rate(lambda t: float(lambda_max(t)), "lambda_max")
    lower = _integrate_rate(lambda t: float(lambda_min(t)), "lambda_min")
    return math.exp(upper), math.exp(-lower)


def select_t_max(
    inputs: BoundInputs,
    hessian_case: Optional[str] = None,
    threshold: float = DEFAULT_GRADIENT_THRESHOLD,
    cap: float = DEFAULT_T_MAX_CAP,
) -> Tuple[float, float]:
    """Smallest flow time after which the gradient envelope is below threshold, capped.

    Returns (T_max, truncation factor), the factor being exp of the Hessian envelope mass
    beyond T_max (1 when no Hessian case is given or C1W = 0).
    """
    if inputs.C1W == 0:
        return 0.0, 1.0
    rate = inputs.alpha if inputs.mode == "uniformly_convex" else inputs.lambda_U
    level = float(gradient_envelope(inputs, 0.0, 0.0))
    T_max = 0.0 if level < threshold else math.log(level / threshold) / rate
    if T_max > cap:
        logger.warning("Gradient envelope still %.3g at the T_max cap %.3g.", level * math.exp(-rate * cap), cap)
        T_max = cap
    factor = 1.0
    if hessian_case is not None:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error", IntegrationWarning)
                tail, _ = integrate.quad(
                    lambda tau: float(hessian_envelope_tau(inputs, tau, hessian_case)), max(T_max, 1e-12), math.inf, limit=400
                )
            factor = math.exp(tail)
        except (IntegrationWarning, BoundError) as exc:
            logger.warning("Truncation factor unavailable for %s: %s", hessian_case, exc)
            factor = math.nan
    return T_max, factor


@dataclass(frozen=True)
class RefinementReport:
    ode_dts: Tuple[float, float, float]
    coarse_change: float
    fine_change: float

    @property
    def ratio(self) -> float:
        return self.coarse_change / self.fine_change if self.fine_change > 0 else math.inf


def ode_refinement_study(scenario: Scenario, value_provider, anchors, T_max: float, ode_dt: float) -> RefinementReport:
    """Terminal anchor changes under two halvings of ode_dt; about 16 for a fourth-order scheme."""
    terminals = [
        integrate_flow(scenario, value_provider, anchors, T_max, ode_dt / 2**k, tol_flow=math.inf).terminal
        for k in range(3)
    ]
    return RefinementReport(
        ode_dts=(ode_dt, ode_dt / 2, ode_dt / 4),
        coarse_change=float(np.max(np.abs(terminals[0] - terminals[1]))),
        fine_change=float(np.max(np.abs(terminals[1] - terminals[2]))),
    )
