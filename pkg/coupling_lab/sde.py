"""Euler-Maruyama simulation of Langevin, optimally controlled and reflection-coupled dynamics."""
import logging
import math
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from .errors import AssumptionError, SimulationError
from .grids import record_indices, step_count, validation_grid
from .profiles import ProfileConstants, q_kernel
from .scenarios import Scenario, as_points
from .streams import PathNoise, map_blocks, stream_ids

logger = logging.getLogger(__name__)

RAW_DUMP_CAP = 1000
SUMMARY_HEADER = ("t", "mean_f_delta", "se_f_delta", "envelope_f", "frac_distinct", "envelope_q")

VectorField = Callable[[float, np.ndarray], np.ndarray]
PairSampler = Callable[[np.random.Generator, int], Tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True, eq=False)
class DriftField:
    """Drift -grad V_t(x) + control_t(x); the control is always evaluated on the first path."""

    potential_grad: VectorField
    dim: int
    control: Optional[VectorField] = None
    one_sided_lipschitz: Optional[float] = None
    control_cap: Optional[float] = None

    @classmethod
    def from_scenario(
        cls,
        scenario: Scenario,
        control: Optional[VectorField] = None,
        control_cap: Optional[float] = None,
    ) -> "DriftField":
        grad = scenario.potential.grad
        alpha = scenario.potential.alpha
        return cls(
            potential_grad=lambda t, x: grad(x),
            dim=scenario.dim,
            control=control,
            one_sided_lipschitz=None if alpha is None else -alpha,
            control_cap=control_cap,
        )

    def validate(self, times: Sequence[float] = (0.0,), grid=None) -> None:
        if self.control is None:
            return
        if self.control_cap is None:
            raise AssumptionError("a control term needs a declared cap.")
        points = validation_grid(self.dim) if grid is None else as_points(grid, self.dim)
        for t in times:
            norms = np.linalg.norm(self.control(t, points), axis=-1)
            k = int(np.argmax(norms))
            if not norms[k] <= self.control_cap * (1 + 1e-9):
                raise AssumptionError(
                    f"control norm {norms[k]:.6g} exceeds cap {self.control_cap:.6g} at t={t:.6g}, x={points[k].tolist()}"
                )


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    times: np.ndarray
    states: np.ndarray
    stream_ids: np.ndarray
    dt: float
    seed: int

    @property
    def n_paths(self) -> int:
        return self.states.shape[1]

    def index_of(self, t: float) -> int:
        hits = np.nonzero(np.isclose(self.times, t, rtol=0.0, atol=1e-9 * max(1.0, abs(t))))[0]
        if hits.size == 0:
            raise KeyError(f"time {t} was not recorded")
        return int(hits[0])

    def at(self, t: float) -> np.ndarray:
        return self.states[self.index_of(t)]

    def mean_and_se(self, t: float) -> Tuple[np.ndarray, np.ndarray]:
        snap = self.at(t)
        return snap.mean(axis=0), snap.std(axis=0, ddof=1) / math.sqrt(len(snap))


def _initial_states(x0, n_paths: int, dim: int) -> np.ndarray:
    pts = as_points(x0, dim)
    if len(pts) == 1:
        return np.repeat(pts, n_paths, axis=0)
    if len(pts) != n_paths:
        raise ValueError(f"x0 has {len(pts)} rows, expected 1 or {n_paths}.")
    return pts.copy()


def _evaluate_drift(fn: VectorField, t: float, x: np.ndarray) -> np.ndarray:
    try:
        return fn(t, x)
    except SimulationError:
        raise
    except Exception as exc:
        raise SimulationError(f"drift evaluation failed at t={t:.6g}: {exc}") from exc


def _require_finite(x: np.ndarray, offset: int, t: float) -> None:
    finite = np.all(np.isfinite(x), axis=-1)
    if not np.all(finite):
        bad = int(np.nonzero(~finite)[0][0])
        raise SimulationError(f"non-finite state on path {offset + bad} at t={t:.6g}")


def _record_plan(record_times: Sequence[float], t0: float, step: float, n_steps: int) -> Dict[int, List[int]]:
    plan: Dict[int, List[int]] = {}
    for slot, k in enumerate(record_indices(record_times, t0, step, n_steps)):
        plan.setdefault(k, []).append(slot)
    return plan


def _window(horizon: float, dt: float) -> Tuple[int, float]:
    if dt <= 0:
        raise ValueError("dt must be positive.")
    if horizon != 0 and horizon < dt * (1 - 1e-12):
        raise ValueError("horizon must be zero or at least dt.")
    n_steps = step_count(horizon, dt)
    return n_steps, (horizon / n_steps if n_steps else dt)


def simulate_paths(
    drift: VectorField,
    x0: np.ndarray,
    t0: float,
    horizon: float,
    dt: float,
    seed: int,
    record_times: Sequence[float],
    observer_factory: Optional[Callable[[slice], Any]] = None,
) -> Tuple[PathEnsemble, List[Any]]:
    """Block-parallel Euler-Maruyama for dX = drift(t, X) dt + sqrt(2) dB.

    An observer, when given, sees (k, t, X_k, xi_k, step) before each update and (t, X_N) at the end.
    """
    n_paths, dim = x0.shape
    n_steps, step = _window(horizon, dt)
    plan = _record_plan(record_times, t0, step, n_steps)
    scale = math.sqrt(2.0 * step)

    def run_block(block_index: int, sl: slice):
        paths = PathNoise(seed, sl, dim)
        x = x0[sl].copy()
        out = np.empty((len(record_times), len(x), dim))
        observer = observer_factory(sl) if observer_factory is not None else None
        for slot in plan.get(0, ()):
            out[slot] = x
        for k in range(n_steps):
            t = t0 + k * step
            noise = paths.step()
            if observer is not None:
                observer.observe(k, t, x, noise, step)
            x = x + _evaluate_drift(drift, t, x) * step + scale * noise
            _require_finite(x, sl.start, t + step)
            for slot in plan.get(k + 1, ()):
                out[slot] = x
        if observer is not None:
            observer.finish(t0 + n_steps * step, x)
        return out, observer

    results = map_blocks(run_block, n_paths)
    states = np.concatenate([r[0] for r in results], axis=1)
    ensemble = PathEnsemble(
        times=np.asarray(record_times, dtype=float),
        states=states,
        stream_ids=stream_ids(seed, slice(0, n_paths)),
        dt=step,
        seed=seed,
    )
    return ensemble, [r[1] for r in results]


def simulate_langevin(
    scenario: Scenario,
    x0,
    horizon: float,
    dt: Optional[float] = None,
    seed: Optional[int] = None,
    n_paths: Optional[int] = None,
    record_times: Optional[Sequence[float]] = None,
) -> PathEnsemble:
    """Paths of dX = -grad U(X) dt + sqrt(2) dB, deterministic given (seed, n_paths, dt)."""
    dt = scenario.sim.dt if dt is None else dt
    seed = scenario.sim.seed if seed is None else seed
    n_paths = scenario.sim.n_paths if n_paths is None else n_paths
    record_times = (0.0, horizon) if record_times is None else record_times
    grad = scenario.potential.grad
    ensemble, _ = simulate_paths(
        lambda t, x: -grad(x),
        _initial_states(x0, n_paths, scenario.dim),
        0.0,
        horizon,
        dt,
        seed,
        record_times,
    )
    return ensemble


def optimal_drift(scenario: Scenario, value_field) -> VectorField:
    grad = scenario.potential.grad
    if value_field is None or scenario.perturbation.is_zero:
        return lambda t, x: -grad(x)
    return lambda t, x: -grad(x) - 2.0 * value_field.grad(t, x)


def simulate_optimal_dynamics(
    scenario: Scenario,
    value_field,
    x0,
    window: Tuple[float, float],
    dt: Optional[float] = None,
    seed: Optional[int] = None,
    n_paths: Optional[int] = None,
    record_times: Optional[Sequence[float]] = None,
    observer_factory: Optional[Callable[[slice], Any]] = None,
):
    """Paths of dX = (-grad U(X) - 2 grad phi_s(X)) ds + sqrt(2) dB on the window [t, T]."""
    t, T = window
    if T < t:
        raise ValueError("window must satisfy t <= T.")
    dt = scenario.sim.dt if dt is None else dt
    seed = scenario.sim.seed if seed is None else seed
    n_paths = scenario.sim.n_paths if n_paths is None else n_paths
    record_times = (t, T) if record_times is None else record_times
    ensemble, observers = simulate_paths(
        optimal_drift(scenario, value_field),
        _initial_states(x0, n_paths, scenario.dim),
        t,
        T - t,
        dt,
        seed,
        record_times,
        observer_factory,
    )
    if observer_factory is not None:
        return ensemble, observers
    return ensemble


@dataclass(frozen=True)
class CoalescenceRule:
    """Paths are identified once |X - Xhat| <= delta (default sqrt(dt)).

    With sign_flip they are also identified once X - Xhat changes sign over a step. That only
    implies a meeting on the line, so it is restricted to d = 1; None turns it on exactly there.
    """

    delta: Optional[float] = None
    sign_flip: Optional[bool] = None

    def threshold(self, dt: float) -> float:
        return math.sqrt(dt) if self.delta is None else float(self.delta)

    def flips_sign(self, dim: int) -> bool:
        if self.sign_flip is None:
            return dim == 1
        if self.sign_flip and dim != 1:
            raise ValueError(f"sign_flip coalescence is only valid in d = 1, got d = {dim}.")
        return self.sign_flip


@dataclass(frozen=True, eq=False)
class CoupledEnsemble:
    times: np.ndarray
    t0: float
    distances: np.ndarray
    initial_distances: np.ndarray
    coalescence_times: np.ndarray
    stream_ids: np.ndarray
    x_final: np.ndarray
    xhat_final: np.ndarray
    delta_coal: float
    dt: float
    seed: int
    dump_x: Optional[np.ndarray] = None
    dump_xhat: Optional[np.ndarray] = None

    @property
    def n_paths(self) -> int:
        return self.distances.shape[1]

    @property
    def fraction_distinct(self) -> np.ndarray:
        return np.mean(self.distances > 0, axis=1)

    def mean_f_curve(self, constants: ProfileConstants) -> np.ndarray:
        return np.mean(constants.f_of(self.distances), axis=1)

    def raw_rows(self) -> List[Tuple[float, ...]]:
        if self.dump_x is None:
            return []
        rows = []
        for path in range(self.dump_x.shape[1]):
            for j, t in enumerate(self.times):
                rows.append((path, float(t), *map(float, self.dump_x[j, path]), *map(float, self.dump_xhat[j, path])))
        return rows


def _pair_states(zeta, paths: PathNoise, sl: slice, dim: int, fixed: Optional[Tuple[np.ndarray, np.ndarray]]):
    if fixed is not None:
        return fixed[0][sl].copy(), fixed[1][sl].copy()
    pairs = paths.each(lambda rng: zeta(rng, 1))
    x = np.concatenate([as_points(p[0], dim) for p in pairs])
    xhat = np.concatenate([as_points(p[1], dim) for p in pairs])
    return x, xhat


def simulate_reflection_coupling(
    drift: DriftField,
    zeta: Union[Tuple[Any, Any], PairSampler],
    horizon: float,
    dt: float,
    seed: int,
    coalescence_rule: Optional[CoalescenceRule] = None,
    n_paths: int = 1000,
    record_times: Optional[Sequence[float]] = None,
    t0: float = 0.0,
    dump_paths: int = 0,
    debug: Optional[bool] = None,
) -> CoupledEnsemble:
    """Coupling by reflection until the pair meets, synchronous coupling afterwards.

    Before meeting, Xhat is driven by (I - 2 e e^T) dB with e = (X - Xhat)/|X - Xhat|, and both
    paths use the control evaluated at X. zeta is either a fixed pair (x0, xhat0), broadcast to
    n_paths, or a sampler (rng, n) -> (x, xhat) called with n = 1 on each path's own stream.
    """
    rule = coalescence_rule or CoalescenceRule()
    dim = drift.dim
    n_steps, step = _window(horizon, dt)
    threshold = rule.threshold(step)
    sign_flip = rule.flips_sign(dim)
    record_times = (t0, t0 + horizon) if record_times is None else record_times
    plan = _record_plan(record_times, t0, step, n_steps)
    scale = math.sqrt(2.0 * step)
    debug = logger.isEnabledFor(logging.DEBUG) if debug is None else debug
    dump_n = min(dump_paths, RAW_DUMP_CAP, n_paths)
    drift.validate(times=(t0, t0 + horizon))

    fixed = None
    if not callable(zeta):
        fixed = (_initial_states(zeta[0], n_paths, dim), _initial_states(zeta[1], n_paths, dim))

    def run_block(block_index: int, sl: slice):
        paths = PathNoise(seed, sl, dim)
        x, xh = _pair_states(zeta, paths, sl, dim, fixed)
        n_b = len(x)
        initial = np.linalg.norm(x - xh, axis=-1)
        met = initial <= threshold
        xh[met] = x[met]
        meeting = np.where(met, t0, np.inf)
        dist = np.empty((len(record_times), n_b))
        keep = max(0, min(dump_n - sl.start, n_b))
        dx = np.empty((len(record_times), keep, dim)) if keep else None
        dxh = np.empty((len(record_times), keep, dim)) if keep else None

        def record(k: int) -> None:
            for slot in plan.get(k, ()):
                dist[slot] = np.linalg.norm(x - xh, axis=-1)
                if keep:
                    dx[slot] = x[:keep]
                    dxh[slot] = xh[:keep]

        record(0)
        for k in range(n_steps):
            t = t0 + k * step
            noise = paths.step()
            ctrl = _evaluate_drift(drift.control, t, x) if drift.control is not None else None
            b = -_evaluate_drift(drift.potential_grad, t, x)
            if ctrl is not None:
                b = b + ctrl
            x_new = x + b * step + scale * noise
            xh_new = x_new.copy()
            active = np.nonzero(~met)[0]
            if active.size:
                delta = x[active] - xh[active]
                e = delta / np.linalg.norm(delta, axis=-1, keepdims=True)
                dB = noise[active]
                dB_hat = dB - 2.0 * e * np.sum(e * dB, axis=-1, keepdims=True)
                if debug:
                    n0 = np.linalg.norm(dB, axis=-1)
                    n1 = np.linalg.norm(dB_hat, axis=-1)
                    if not np.allclose(n0, n1, rtol=1e-12, atol=1e-14):
                        raise SimulationError(f"reflected increment is not an isometry at t={t:.6g}")
                bh = -_evaluate_drift(drift.potential_grad, t, xh[active])
                if ctrl is not None:
                    bh = bh + ctrl[active]
                candidate = xh[active] + bh * step + scale * dB_hat
                gap = x_new[active] - candidate
                meets = np.linalg.norm(gap, axis=-1) <= threshold
                if sign_flip:
                    meets |= np.sum(gap * delta, axis=-1) <= 0
                apart = active[~meets]
                xh_new[apart] = candidate[~meets]
                joined = active[meets]
                met[joined] = True
                meeting[joined] = t + step
            x, xh = x_new, xh_new
            _require_finite(x, sl.start, t + step)
            _require_finite(xh, sl.start, t + step)
            record(k + 1)
        return dist, initial, meeting, x, xh, dx, dxh

    results = map_blocks(run_block, n_paths)
    dumps = [r for r in results if r[5] is not None]
    ensemble = CoupledEnsemble(
        times=np.asarray(record_times, dtype=float),
        t0=t0,
        distances=np.concatenate([r[0] for r in results], axis=1),
        initial_distances=np.concatenate([r[1] for r in results]),
        coalescence_times=np.concatenate([r[2] for r in results]),
        stream_ids=stream_ids(seed, slice(0, n_paths)),
        x_final=np.concatenate([r[3] for r in results]),
        xhat_final=np.concatenate([r[4] for r in results]),
        delta_coal=threshold,
        dt=step,
        seed=seed,
        dump_x=np.concatenate([r[5] for r in dumps], axis=1) if dumps else None,
        dump_xhat=np.concatenate([r[6] for r in dumps], axis=1) if dumps else None,
    )
    logger.info(
        "Coupled %s paths over %.6g time units (dt=%.3g, delta_coal=%.3g); %.4f still apart at the end.",
        n_paths,
        horizon,
        step,
        threshold,
        float(np.mean(np.isinf(ensemble.coalescence_times))),
    )
    return ensemble


def simulate_optimal_coupling(
    scenario: Scenario,
    value_field,
    zeta,
    window: Tuple[float, float],
    dt: Optional[float] = None,
    seed: Optional[int] = None,
    n_paths: Optional[int] = None,
    coalescence_rule: Optional[CoalescenceRule] = None,
    record_times: Optional[Sequence[float]] = None,
    gradient_cap: Optional[float] = None,
) -> CoupledEnsemble:
    """Reflection coupling of the optimally controlled dynamics, control -2 grad phi_s(X_s) on both paths."""
    t, T = window
    cap = scenario.perturbation.C1W if gradient_cap is None else gradient_cap
    control = None
    if value_field is not None and not scenario.perturbation.is_zero:
        control = lambda s, x: -2.0 * value_field.grad(s, x)
    drift = DriftField.from_scenario(scenario, control=control, control_cap=2.0 * cap * (1 + 1e-9) + 1e-12)
    return simulate_reflection_coupling(
        drift,
        zeta,
        T - t,
        scenario.sim.dt if dt is None else dt,
        scenario.sim.seed if seed is None else seed,
        coalescence_rule=coalescence_rule,
        n_paths=scenario.sim.n_paths if n_paths is None else n_paths,
        record_times=record_times,
        t0=t,
    )


@dataclass(frozen=True)
class MarginalCheck:
    ks: float
    pvalue: float
    n_coupled: int
    n_reference: int
    coordinate: int = 0

    def as_dict(self) -> Dict[str, Any]:
        return {
            "ks": self.ks,
            "pvalue": self.pvalue,
            "n_coupled": self.n_coupled,
            "n_reference": self.n_reference,
            "coordinate": self.coordinate,
        }


def marginal_check(
    ensemble: CoupledEnsemble,
    scenario: Scenario,
    xhat0,
    horizon: float,
    n_reference: int = 10_000,
    seed: Optional[int] = None,
) -> MarginalCheck:
    """Two-sample KS between the coupled Xhat at the horizon and an independent Langevin run from xhat0.

    Without control the second path of the coupling is itself a Langevin diffusion, so both
    samples share a law. In d > 1 the worst coordinate is reported.
    """
    if ensemble.n_paths == 0:
        raise ValueError("ensemble is empty.")
    seed = ensemble.seed + 1 if seed is None else seed
    reference = simulate_langevin(
        scenario, xhat0, horizon, dt=ensemble.dt, seed=seed, n_paths=n_reference, record_times=(horizon,)
    ).states[-1]
    results = [
        stats.ks_2samp(ensemble.xhat_final[:, j], reference[:, j]) for j in range(ensemble.xhat_final.shape[1])
    ]
    worst = int(np.argmax([r.statistic for r in results]))
    check = MarginalCheck(
        ks=float(results[worst].statistic),
        pvalue=float(results[worst].pvalue),
        n_coupled=ensemble.n_paths,
        n_reference=n_reference,
        coordinate=worst,
    )
    logger.info("Coupled second marginal vs independent Langevin: KS %.4g (p=%.3g).", check.ks, check.pvalue)
    return check


@dataclass(frozen=True, eq=False)
class ContractionReport:
    t: np.ndarray
    mean_f: np.ndarray
    se_f: np.ndarray
    envelope_f: np.ndarray
    frac_distinct: np.ndarray
    se_frac: np.ndarray
    envelope_q: np.ndarray
    f0: float
    elapsed: np.ndarray

    def rows(self) -> List[Tuple[float, ...]]:
        return [
            tuple(float(v) for v in row)
            for row in zip(self.t, self.mean_f, self.se_f, self.envelope_f, self.frac_distinct, self.envelope_q)
        ]

    def contraction_excess(self) -> np.ndarray:
        """mean f(|Delta_t|) - (envelope + 3 SE); non-positive where the contraction bound holds."""
        return self.mean_f - (self.envelope_f + 3.0 * self.se_f)

    def meeting_excess(self) -> np.ndarray:
        return self.frac_distinct - (self.envelope_q + 3.0 * self.se_frac)


def contraction_report(ensemble: CoupledEnsemble, constants: ProfileConstants) -> ContractionReport:
    n = ensemble.n_paths
    if n == 0:
        raise ValueError("ensemble is empty.")
    f_vals = constants.f_of(ensemble.distances)
    mean_f = f_vals.mean(axis=1)
    se_f = f_vals.std(axis=1, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(mean_f)
    f0 = float(np.mean(constants.f_of(ensemble.initial_distances)))
    elapsed = ensemble.times - ensemble.t0
    envelope_f = np.exp(-constants.lambda_ * elapsed) * f0
    if f0 == 0.0:
        envelope_q = np.zeros_like(elapsed)
    else:
        envelope_q = q_kernel(constants, np.atleast_1d(elapsed)) * f0
    frac = ensemble.fraction_distinct
    return ContractionReport(
        t=ensemble.times.copy(),
        mean_f=mean_f,
        se_f=se_f,
        envelope_f=envelope_f,
        frac_distinct=frac,
        se_frac=np.sqrt(frac * (1.0 - frac) / n),
        envelope_q=envelope_q,
        f0=f0,
        elapsed=elapsed,
    )


@dataclass(frozen=True)
class DecayFit:
    rate: float
    half_width: float
    n_points: int


def decay_rate(report: ContractionReport, t_min: float = 0.0) -> DecayFit:
    """Least-squares slope of log mean f(|Delta_t|) against t, with a 95% half-width."""
    mask = (report.elapsed > t_min) & (report.mean_f > 0)
    if np.count_nonzero(mask) < 3:
        raise ValueError("need at least three positive points to fit a decay rate.")
    fit = stats.linregress(report.elapsed[mask], np.log(report.mean_f[mask]))
    return DecayFit(rate=float(-fit.slope), half_width=float(1.96 * fit.stderr), n_points=int(np.count_nonzero(mask)))
