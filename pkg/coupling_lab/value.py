"""Feynman-Kac estimation of phi_t = -log P_{T-t} e^{-W} and consistency diagnostics.

All estimators share one set of Brownian increments across every query point (common random
numbers), so finite differences of the estimated field cancel most of the sampling noise.
Standard errors come from the influence function of -log(mean weight).
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.interpolate import CubicSpline, RegularGridInterpolator
from scipy.special import logsumexp

from .errors import EstimationError
from .grids import record_indices, step_count
from .scenarios import Scenario, as_points
from .sde import simulate_optimal_dynamics
from .streams import PathNoise, map_blocks

logger = logging.getLogger(__name__)

DEFAULT_GRAD_STEP = 0.05
DEFAULT_HESS_STEP = 0.2
RANDOM_DIRECTIONS = 8
WEIGHT_FLOOR = math.log(1e-300)
STATE_BUDGET = 8_000_000
RESIDUAL_FACTOR = 5.0
TERMINAL_TOLERANCE = 1e-10


class ValueField(Protocol):
    horizon: float

    def grad(self, t: float, x) -> np.ndarray:
        ...


@dataclass(frozen=True, eq=False)
class WeightRecord:
    taus: np.ndarray
    n_samples: int
    step: float
    log_weights: Optional[np.ndarray] = None
    log_sums: Optional[np.ndarray] = None
    coarse_log_weights: Optional[np.ndarray] = None


def _point_chunks(n_points: int, n_block: int, dim: int) -> List[slice]:
    per_chunk = max(1, STATE_BUDGET // max(1, n_block * dim))
    return [slice(start, min(start + per_chunk, n_points)) for start in range(0, n_points, per_chunk)]


def simulate_log_weights(
    scenario: Scenario,
    points,
    record_taus: Sequence[float],
    n_samples: int,
    seed: int,
    dt: float,
    keep_samples: bool = True,
    coarse: bool = False,
) -> WeightRecord:
    """-W(X_tau^x) for every point and recorded tau, all points driven by the same increments.

    With keep_samples=False only log-sum-exp totals are kept. With coarse=True a second chain
    driven by the same increments aggregated over pairs of steps (step 2 dt) is recorded too.
    """
    pts = as_points(points, scenario.dim)
    taus = np.asarray(record_taus, dtype=float)
    if np.any(taus < 0):
        raise ValueError("record taus must be non-negative.")
    horizon = float(taus.max()) if taus.size else 0.0
    n_steps = step_count(horizon, dt)
    step = horizon / n_steps if n_steps else dt
    slots = record_indices(taus, 0.0, step, n_steps)
    if coarse and (n_steps % 2 or any(k % 2 for k in slots)):
        logger.warning("Coarse chain skipped: record times are not on the 2*dt grid (step %.6g).", step)
        coarse = False
    plan = {}
    for slot, k in enumerate(slots):
        plan.setdefault(k, []).append(slot)
    grad_U = scenario.potential.grad
    W = scenario.perturbation.value
    scale = math.sqrt(2.0 * step)
    n_levels, n_points, dim = len(taus), len(pts), scenario.dim

    def run_block(block_index: int, sl: slice):
        n_b = sl.stop - sl.start
        fine = np.empty((n_levels, n_points, n_b))
        rough = np.empty((n_levels, n_points, n_b)) if coarse else None
        for chunk in _point_chunks(n_points, n_b, dim):
            samples = PathNoise(seed, sl, dim)
            x = np.repeat(pts[chunk, None, :], n_b, axis=1)
            xc = x.copy() if coarse else None
            pending = np.zeros((n_b, dim))
            for slot in plan.get(0, ()):
                fine[slot, chunk] = -W(x)
                if coarse:
                    rough[slot, chunk] = fine[slot, chunk]
            for k in range(n_steps):
                noise = samples.step()
                x = x - grad_U(x) * step + scale * noise[None]
                if coarse:
                    pending += noise
                    if k % 2:
                        xc = xc - grad_U(xc) * (2.0 * step) + scale * pending[None]
                        pending[:] = 0.0
                if not np.all(np.isfinite(x)):
                    raise EstimationError(f"non-finite Langevin state at tau={(k + 1) * step:.6g}")
                for slot in plan.get(k + 1, ()):
                    fine[slot, chunk] = -W(x)
                    if coarse:
                        rough[slot, chunk] = -W(xc)
        if keep_samples:
            return fine, rough
        return logsumexp(fine, axis=-1), np.max(fine, axis=-1)

    results = map_blocks(run_block, n_samples)
    if keep_samples:
        log_weights = np.concatenate([r[0] for r in results], axis=-1)
        coarse_lw = np.concatenate([r[1] for r in results], axis=-1) if coarse else None
        _check_floor(np.max(log_weights, axis=-1), pts, taus)
        return WeightRecord(taus, n_samples, step, log_weights=log_weights, coarse_log_weights=coarse_lw)
    log_sums = np.logaddexp.reduce(np.stack([r[0] for r in results]), axis=0)
    _check_floor(np.max(np.stack([r[1] for r in results]), axis=0), pts, taus)
    return WeightRecord(taus, n_samples, step, log_sums=log_sums)


def _check_floor(max_log_weight: np.ndarray, pts: np.ndarray, taus: np.ndarray) -> None:
    low = max_log_weight < WEIGHT_FLOOR
    if np.any(low):
        level, point = (int(v[0]) for v in np.nonzero(low))
        raise EstimationError(
            f"every weight e^(-W) is below 1e-300 at x={pts[point].tolist()}, tau={taus[level]:.6g}; "
            "the estimator variance is unusable."
        )


def phi_and_influence(log_weights: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """phi = -log mean e^{lw} along the last axis, with per-sample influence 1 - w_i / mean."""
    n = log_weights.shape[-1]
    lse = logsumexp(log_weights, axis=-1)
    phi = -(lse - math.log(n))
    psi = 1.0 - np.exp(log_weights - lse[..., None] + math.log(n))
    return phi, psi


def standard_error(influence: np.ndarray) -> np.ndarray:
    n = influence.shape[-1]
    return np.std(influence, axis=-1, ddof=1) / math.sqrt(n)


@dataclass(frozen=True, eq=False)
class FieldEstimate:
    points: np.ndarray
    t: float
    horizon: float
    values: np.ndarray
    se: np.ndarray
    n_samples: int
    seed: int
    dt: float
    fd_step: Optional[float] = None
    grad: Optional[np.ndarray] = None
    se_grad: Optional[np.ndarray] = None
    hess_quotient: Optional[np.ndarray] = None
    se_hess: Optional[np.ndarray] = None
    directions: Optional[np.ndarray] = None
    quotients: Optional[np.ndarray] = None
    se_quotients: Optional[np.ndarray] = None
    se_amplification: Optional[float] = None

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def max_hess_quotient(self) -> Tuple[float, float]:
        """sup over points and directions of |<u, hess u>| with the SE at the maximiser."""
        if self.hess_quotient is None:
            raise ValueError("no Hessian estimate attached.")
        k = int(np.argmax(self.hess_quotient))
        return float(self.hess_quotient[k]), float(self.se_hess[k])

    def sup_grad_norm(self) -> Tuple[float, float]:
        if self.grad is None:
            raise ValueError("no gradient estimate attached.")
        norms = np.linalg.norm(self.grad, axis=1)
        k = int(np.argmax(norms))
        return float(norms[k]), float(np.linalg.norm(self.se_grad[k]))

    def header(self) -> Tuple[str, ...]:
        return field_header(self.dim)

    def rows(self) -> List[Tuple[float, ...]]:
        nan_vec = [math.nan] * self.dim
        out = []
        for i, x in enumerate(self.points):
            grad = self.grad[i].tolist() if self.grad is not None else nan_vec
            se_grad = self.se_grad[i].tolist() if self.se_grad is not None else nan_vec
            hq = float(self.hess_quotient[i]) if self.hess_quotient is not None else math.nan
            se_h = float(self.se_hess[i]) if self.se_hess is not None else math.nan
            out.append((self.t, *x.tolist(), float(self.values[i]), float(self.se[i]), *grad, *se_grad, hq, se_h))
        return out


def _axis_names(prefix: str, dim: int) -> List[str]:
    return [prefix] if dim == 1 else [f"{prefix}{i + 1}" for i in range(dim)]


def field_header(dim: int) -> Tuple[str, ...]:
    return (
        "t",
        *_axis_names("x", dim),
        "phi",
        "se_phi",
        *_axis_names("grad", dim),
        *_axis_names("se_grad", dim),
        "hess_quot",
        "se_hess",
    )


def residual_header(dim: int) -> Tuple[str, ...]:
    return ("t", *_axis_names("x", dim), "residual", "budget")


def default_directions(dim: int, seed: int, n_random: int = RANDOM_DIRECTIONS) -> np.ndarray:
    """Coordinate directions plus n_random seeded unit vectors (coordinates only in 1-d)."""
    eye = np.eye(dim)
    if dim == 1:
        return eye
    rng = np.random.default_rng([seed, 7])
    raw = rng.standard_normal((n_random, dim))
    raw /= np.linalg.norm(raw, axis=1, keepdims=True)
    return np.vstack([eye, raw])


def _check_window(t: float, T: float, n_samples: int) -> float:
    if not 0.0 <= t <= T:
        raise ValueError(f"need 0 <= t <= T, got t={t}, T={T}.")
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2.")
    return T - t


def _estimate(
    scenario: Scenario,
    t: float,
    T: float,
    points,
    n_samples: Optional[int],
    seed: Optional[int],
    dt: Optional[float],
    grad_step: Optional[float] = None,
    hess_step: Optional[float] = None,
    directions: Optional[np.ndarray] = None,
) -> FieldEstimate:
    n_samples = scenario.sim.n_paths if n_samples is None else n_samples
    seed = scenario.sim.seed if seed is None else seed
    dt = scenario.sim.dt if dt is None else dt
    tau = _check_window(t, T, n_samples)
    for h in (grad_step, hess_step):
        if h is not None and not h > 0:
            raise ValueError("finite-difference step must be positive.")
    pts = as_points(points, scenario.dim)
    m, dim = pts.shape
    fd_step = hess_step if hess_step is not None else grad_step
    if directions is not None:
        directions = np.asarray(directions, dtype=float).reshape(-1, dim)
        if not np.allclose(np.linalg.norm(directions, axis=1), 1.0):
            raise ValueError("directions must be unit vectors.")

    if scenario.perturbation.is_zero:
        with_grad = grad_step is not None
        with_hess = hess_step is not None
        k = 0 if directions is None else len(directions)
        return FieldEstimate(
            points=pts,
            t=t,
            horizon=T,
            values=np.zeros(m),
            se=np.zeros(m),
            n_samples=n_samples,
            seed=seed,
            dt=dt,
            fd_step=fd_step,
            grad=np.zeros((m, dim)) if with_grad else None,
            se_grad=np.zeros((m, dim)) if with_grad else None,
            hess_quotient=np.zeros(m) if with_hess else None,
            se_hess=np.zeros(m) if with_hess else None,
            directions=directions,
            quotients=np.zeros((m, k)) if with_hess else None,
            se_quotients=np.zeros((m, k)) if with_hess else None,
            se_amplification=hess_step**-2 if with_hess else None,
        )

    stencil = [pts]
    if grad_step is not None:
        for i in range(dim):
            shift = grad_step * np.eye(dim)[i]
            stencil += [pts + shift, pts - shift]
    if hess_step is not None:
        for u in directions:
            stencil += [pts + hess_step * u, pts - hess_step * u]
    record = simulate_log_weights(scenario, np.vstack(stencil), (tau,), n_samples, seed, dt)
    phi, psi = phi_and_influence(record.log_weights[0])
    phi = phi.reshape(len(stencil), m)
    psi = psi.reshape(len(stencil), m, n_samples)

    grad = se_grad = None
    offset = 1
    if grad_step is not None:
        grad = np.empty((m, dim))
        se_grad = np.empty((m, dim))
        for i in range(dim):
            plus, minus = offset + 2 * i, offset + 2 * i + 1
            grad[:, i] = (phi[plus] - phi[minus]) / (2.0 * grad_step)
            se_grad[:, i] = standard_error((psi[plus] - psi[minus]) / (2.0 * grad_step))
        offset += 2 * dim

    hess_quotient = se_hess = quotients = se_quotients = None
    if hess_step is not None:
        k = len(directions)
        quotients = np.empty((m, k))
        se_quotients = np.empty((m, k))
        h2 = hess_step * hess_step
        for j in range(k):
            plus, minus = offset + 2 * j, offset + 2 * j + 1
            quotients[:, j] = (phi[plus] - 2.0 * phi[0] + phi[minus]) / h2
            se_quotients[:, j] = standard_error((psi[plus] - 2.0 * psi[0] + psi[minus]) / h2)
        best = np.argmax(np.abs(quotients), axis=1)
        rows = np.arange(m)
        hess_quotient = np.abs(quotients[rows, best])
        se_hess = se_quotients[rows, best]

    return FieldEstimate(
        points=pts,
        t=t,
        horizon=T,
        values=phi[0],
        se=standard_error(psi[0]),
        n_samples=n_samples,
        seed=seed,
        dt=record.step,
        fd_step=fd_step,
        grad=grad,
        se_grad=se_grad,
        hess_quotient=hess_quotient,
        se_hess=se_hess,
        directions=directions,
        quotients=quotients,
        se_quotients=se_quotients,
        se_amplification=hess_step**-2 if hess_step is not None else None,
    )


def estimate_phi(
    scenario: Scenario,
    t: float,
    T: float,
    points,
    n_samples: Optional[int] = None,
    seed: Optional[int] = None,
    dt: Optional[float] = None,
) -> FieldEstimate:
    """phi_t(x) = -log mean e^{-W(X_{T-t}^x)} over Langevin paths from x."""
    return _estimate(scenario, t, T, points, n_samples, seed, dt)


def estimate_grad_phi(
    scenario: Scenario,
    t: float,
    T: float,
    points,
    n_samples: Optional[int] = None,
    seed: Optional[int] = None,
    h: float = DEFAULT_GRAD_STEP,
    dt: Optional[float] = None,
) -> FieldEstimate:
    """Central differences of phi with common random numbers for x + h e_i and x - h e_i."""
    return _estimate(scenario, t, T, points, n_samples, seed, dt, grad_step=h)


def estimate_hess_phi(
    scenario: Scenario,
    t: float,
    T: float,
    points,
    directions=None,
    n_samples: Optional[int] = None,
    seed: Optional[int] = None,
    h: float = DEFAULT_HESS_STEP,
    dt: Optional[float] = None,
) -> FieldEstimate:
    """Second differences <u, hess phi u> over the given unit directions; the max |quotient| per point
    is a lower bound on the sup-norm used by the Hessian envelopes.
    """
    seed_value = scenario.sim.seed if seed is None else seed
    if directions is None:
        directions = default_directions(scenario.dim, seed_value)
    estimate = _estimate(scenario, t, T, points, n_samples, seed, dt, hess_step=h, directions=directions)
    logger.debug("Hessian estimate at t=%.6g: SE amplified by h^-2 = %.6g.", t, estimate.se_amplification)
    return estimate


@dataclass(frozen=True, eq=False)
class ResidualTable:
    times: np.ndarray
    points: np.ndarray
    residual: np.ndarray
    budget: np.ndarray
    se: np.ndarray
    truncation: np.ndarray
    refinement: np.ndarray
    terminal_gap: Optional[float] = None

    def within(self, factor: float = RESIDUAL_FACTOR) -> np.ndarray:
        return np.abs(self.residual) <= factor * self.budget

    @property
    def passed(self) -> bool:
        terminal_ok = self.terminal_gap is None or self.terminal_gap <= TERMINAL_TOLERANCE
        return bool(np.all(self.within())) and terminal_ok

    @property
    def worst_ratio(self) -> float:
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(self.budget > 0, np.abs(self.residual) / self.budget, np.where(self.residual == 0, 0.0, np.inf))
        return float(np.max(ratio))

    def rows(self) -> List[Tuple[float, ...]]:
        return [
            (float(t), *map(float, x), float(self.residual[i, j]), float(self.budget[i, j]))
            for i, t in enumerate(self.times)
            for j, x in enumerate(self.points)
        ]


def oracle_hjb_residual(oracle, times: Sequence[float], points) -> ResidualTable:
    """Residual of the HJB equation for an analytic field, evaluated from its exact derivatives."""
    pts = as_points(points, oracle.dim)
    times = np.asarray(times, dtype=float)
    residual = np.vstack([oracle.hjb_residual(t, pts) for t in times])
    zeros = np.zeros_like(residual)
    return ResidualTable(times, pts, residual, zeros.copy(), zeros.copy(), zeros.copy(), zeros.copy(), terminal_gap=0.0)


def _hjb_operator(phi, taus, h, grad_U, order: int, psi=None):
    """Residual of d_t phi + lap phi - grad U . grad phi - |grad phi|^2 from stencil values.

    phi has shape (levels, 1 + 4d, m): centre then (+h, -h, +2h, -2h) per axis. When psi is given
    the same linearised operator is applied to it for the delta-method standard error.
    """
    d = grad_U.shape[1]
    centre = phi[:, 0]
    grad = np.empty((phi.shape[0], phi.shape[2], d))
    lap = np.zeros_like(centre)
    for i in range(d):
        p1, m1, p2, m2 = (phi[:, 1 + 4 * i + j] for j in range(4))
        if order == 4:
            grad[..., i] = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h)
            lap += (-p2 + 16.0 * p1 - 30.0 * centre + 16.0 * m1 - m2) / (12.0 * h * h)
        else:
            grad[..., i] = (p1 - m1) / (2.0 * h)
            lap += (p1 - 2.0 * centre + m1) / (h * h)
    dtau = np.gradient(centre, taus, axis=0, edge_order=2 if order == 4 else 1)
    residual = -dtau + lap - np.sum(grad_U[None] * grad, axis=-1) - np.sum(grad * grad, axis=-1)
    if psi is None:
        return residual, None
    c = psi[:, 0]
    lin = -np.gradient(c, taus, axis=0, edge_order=2)
    for i in range(d):
        p1, m1, p2, m2 = (psi[:, 1 + 4 * i + j] for j in range(4))
        dgrad = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h)
        lin += (-p2 + 16.0 * p1 - 30.0 * c + 16.0 * m1 - m2) / (12.0 * h * h)
        lin -= (grad_U[None, :, i, None] + 2.0 * grad[..., i, None]) * dgrad
    return residual, lin


def hjb_residual(
    scenario: Scenario,
    times: Sequence[float],
    points,
    n_samples: Optional[int] = None,
    seed: Optional[int] = None,
    h: float = 0.1,
    dt: Optional[float] = None,
    horizon: Optional[float] = None,
) -> ResidualTable:
    """Finite-difference HJB residual of the Feynman-Kac field on a (t, x) grid, d <= 2.

    The budget per node is SE + |R - R_low| + |R_dt - R_2dt|, where R_low uses second-order
    stencils and R_2dt reuses the same increments aggregated over pairs of steps.
    """
    if scenario.dim > 2:
        raise ValueError("HJB residual tables are limited to d <= 2.")
    T = scenario.sim.horizon if horizon is None else horizon
    n_samples = scenario.sim.n_paths if n_samples is None else n_samples
    seed = scenario.sim.seed if seed is None else seed
    dt = scenario.sim.dt if dt is None else dt
    times = np.asarray(times, dtype=float)
    if len(times) < 3 or np.any(np.diff(times) <= 0):
        raise ValueError("need at least three increasing times.")
    for t in times:
        _check_window(float(t), T, n_samples)
    pts = as_points(points, scenario.dim)
    m, d = pts.shape
    taus = T - times
    grad_U = scenario.potential.grad(pts)
    eye = np.eye(d)
    stencil = [pts]
    for i in range(d):
        stencil += [pts + h * eye[i], pts - h * eye[i], pts + 2 * h * eye[i], pts - 2 * h * eye[i]]
    n_stencil = len(stencil)

    if scenario.perturbation.is_zero:
        zeros = np.zeros((len(times), m))
        return ResidualTable(times, pts, zeros, zeros.copy(), zeros.copy(), zeros.copy(), zeros.copy(), 0.0)

    record = simulate_log_weights(scenario, np.vstack(stencil), taus, n_samples, seed, dt, coarse=True)
    phi, psi = phi_and_influence(record.log_weights)
    phi = phi.reshape(len(times), n_stencil, m)
    psi = psi.reshape(len(times), n_stencil, m, n_samples)
    residual, lin = _hjb_operator(phi, taus, h, grad_U, 4, psi)
    low, _ = _hjb_operator(phi, taus, h, grad_U, 2)
    se = standard_error(lin)
    refinement = np.zeros_like(residual)
    if record.coarse_log_weights is not None:
        coarse_phi, _ = phi_and_influence(record.coarse_log_weights)
        coarse, _ = _hjb_operator(coarse_phi.reshape(len(times), n_stencil, m), taus, h, grad_U, 4)
        refinement = np.abs(residual - coarse)
    truncation = np.abs(residual - low)

    terminal_gap = None
    at_terminal = np.nonzero(taus == 0.0)[0]
    if at_terminal.size:
        W = scenario.perturbation.value(pts)
        terminal_gap = float(np.max(np.abs(phi[at_terminal[0], 0] - W)))
    table = ResidualTable(times, pts, residual, se + truncation + refinement, se, truncation, refinement, terminal_gap)
    logger.info("HJB residual: worst |R|/budget = %.3g over %s nodes.", table.worst_ratio, residual.size)
    return table


@dataclass(frozen=True, eq=False)
class PontryaginReport:
    times: np.ndarray
    discrepancy: np.ndarray
    terminal_gap: float
    dt: float
    n_paths: int

    @property
    def mean_discrepancy(self) -> float:
        return float(np.mean(self.discrepancy))


class _CostateObserver:
    """Integrates dY = hess U(X) Y ds + sqrt(2) Z dB along each path of a block, Z = hess phi."""

    def __init__(self, scenario: Scenario, field: ValueField):
        self.scenario = scenario
        self.field = field
        self.field_hess = getattr(field, "hess", None)
        self.y: Optional[np.ndarray] = None
        self.sums: List[float] = []
        self.terminal_sum = 0.0

    def observe(self, k: int, t: float, x: np.ndarray, noise: np.ndarray, step: float) -> None:
        target = self.field.grad(t, x)
        if self.y is None:
            self.y = target.copy()
        self.sums.append(float(np.sum(np.linalg.norm(self.y - target, axis=-1))))
        dy = np.einsum("nij,nj->ni", self.scenario.potential.hess(x), self.y) * step
        if self.field_hess is not None:
            dy += np.einsum("nij,nj->ni", self.field_hess(t, x), noise) * math.sqrt(2.0 * step)
        self.y = self.y + dy

    def finish(self, t: float, x: np.ndarray) -> None:
        target = self.field.grad(t, x)
        if self.y is None:
            self.y = target.copy()
        self.sums.append(float(np.sum(np.linalg.norm(self.y - target, axis=-1))))
        terminal = self.scenario.perturbation.grad(x)
        self.terminal_sum = float(np.sum(np.linalg.norm(self.y - terminal, axis=-1)))


def pontryagin_check(
    scenario: Scenario,
    value_field: ValueField,
    x0,
    window: Tuple[float, float],
    dt: Optional[float] = None,
    seed: Optional[int] = None,
    n_paths: int = 1000,
) -> PontryaginReport:
    """Forward costate Y_s against grad phi_s(X_s) along optimally controlled paths."""
    if scenario.potential.hess is None:
        raise EstimationError("the costate check needs the Hessian of U.")
    t, T = window
    dt = scenario.sim.dt if dt is None else dt
    ensemble, observers = simulate_optimal_dynamics(
        scenario,
        value_field,
        x0,
        window,
        dt=dt,
        seed=seed,
        n_paths=n_paths,
        observer_factory=lambda sl: _CostateObserver(scenario, value_field),
    )
    n_steps = step_count(T - t, dt)
    sums = np.sum([obs.sums for obs in observers], axis=0)
    times = t + np.arange(n_steps + 1) * ensemble.dt
    report = PontryaginReport(
        times=times,
        discrepancy=sums / n_paths,
        terminal_gap=sum(obs.terminal_sum for obs in observers) / n_paths,
        dt=ensemble.dt,
        n_paths=n_paths,
    )
    logger.info("Costate check: mean |Y - grad phi| = %.3g at dt=%.3g.", report.mean_discrepancy, report.dt)
    return report


class MonteCarloField:
    """Frozen-seed tabulation of grad phi on a (tau, node) grid, d <= 2.

    Values between nodes use cubic interpolation in space and linear interpolation in tau;
    points outside the node box are clamped to it and tau beyond the last level uses that level.
    """

    def __init__(
        self,
        scenario: Scenario,
        horizon: float,
        taus: Sequence[float],
        axes: Sequence[np.ndarray],
        n_samples: int,
        seed: int,
        dt: float,
        h: float = DEFAULT_GRAD_STEP,
    ):
        if scenario.dim > 2 or len(axes) != scenario.dim:
            raise ValueError("MonteCarloField needs one node axis per dimension and d <= 2.")
        self.scenario = scenario
        self.horizon = float(horizon)
        self.taus = np.asarray(taus, dtype=float)
        if self.taus[0] != 0.0 or np.any(np.diff(self.taus) <= 0):
            raise ValueError("tau levels must start at 0 and increase.")
        self.axes = [np.asarray(a, dtype=float) for a in axes]
        self.n_samples = n_samples
        self.seed = seed
        self.dim = scenario.dim
        mesh = np.meshgrid(*self.axes, indexing="ij")
        nodes = np.stack([g.ravel() for g in mesh], axis=-1)
        shape = mesh[0].shape
        eye = np.eye(self.dim)
        self.grad_table = np.zeros((len(self.taus),) + shape + (self.dim,))
        if not scenario.perturbation.is_zero:
            stencil = []
            for i in range(self.dim):
                stencil += [nodes + h * eye[i], nodes - h * eye[i]]
            record = simulate_log_weights(scenario, np.vstack(stencil), self.taus, n_samples, seed, dt, keep_samples=False)
            phi = -(record.log_sums - math.log(n_samples))
            phi = phi.reshape(len(self.taus), 2 * self.dim, len(nodes))
            for i in range(self.dim):
                grad_i = (phi[:, 2 * i] - phi[:, 2 * i + 1]) / (2.0 * h)
                self.grad_table[..., i] = grad_i.reshape((len(self.taus),) + shape)
        self._levels = [self._spatial(self.grad_table[j]) for j in range(len(self.taus))]
        logger.info(
            "Tabulated grad phi on %s nodes x %s tau levels (n=%s, seed=%s).",
            len(nodes),
            len(self.taus),
            n_samples,
            seed,
        )

    def _spatial(self, table: np.ndarray):
        if self.dim == 1:
            return CubicSpline(self.axes[0], table, axis=0)
        return RegularGridInterpolator(tuple(self.axes), table, method="cubic")

    def _clamp(self, x) -> np.ndarray:
        pts = as_points(x, self.dim)
        lo = np.array([a[0] for a in self.axes])
        hi = np.array([a[-1] for a in self.axes])
        return np.clip(pts, lo, hi)

    def _bracket(self, t: float) -> Tuple[int, int, float]:
        tau = min(max(self.horizon - t, 0.0), float(self.taus[-1]))
        j = int(np.searchsorted(self.taus, tau, side="right")) - 1
        j = min(max(j, 0), len(self.taus) - 1)
        if j == len(self.taus) - 1:
            return j, j, 0.0
        weight = (tau - self.taus[j]) / (self.taus[j + 1] - self.taus[j])
        return j, j + 1, weight

    def _at_level(self, level: int, pts: np.ndarray, nu: int = 0) -> np.ndarray:
        if self.dim == 1:
            return self._levels[level](pts[:, 0], nu)
        return self._levels[level](pts)

    def _interpolate(self, t: float, pts: np.ndarray, nu: int = 0) -> np.ndarray:
        lo, hi, w = self._bracket(t)
        out = self._at_level(lo, pts, nu)
        if w > 0:
            out = (1.0 - w) * out + w * self._at_level(hi, pts, nu)
        return np.asarray(out)

    def grad(self, t: float, x) -> np.ndarray:
        pts = self._clamp(x)
        return self._interpolate(t, pts).reshape(len(pts), self.dim)

    def hess(self, t: float, x) -> np.ndarray:
        pts = self._clamp(x)
        if self.dim == 1:
            return self._interpolate(t, pts, nu=1).reshape(len(pts), 1, 1)
        step = 1e-3 * min(float(a[1] - a[0]) for a in self.axes)
        cols = []
        for i in range(self.dim):
            shift = step * np.eye(self.dim)[i]
            cols.append((self.grad(t, pts + shift) - self.grad(t, pts - shift)) / (2.0 * step))
        hess = np.stack(cols, axis=-1)
        return 0.5 * (hess + np.swapaxes(hess, -1, -2))

    def flow_field(self, tau: float, x) -> np.ndarray:
        return self.grad(self.horizon - tau, x)
