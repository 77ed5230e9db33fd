"""Convexity profiles and the contraction constants built from them.

A profile kappa maps a distance r > 0 to the worst one-sided monotonicity of a gradient
field over pairs at that distance. From a profile in class K we tabulate

    phi(r) = exp(-1/4 int_0^r s kappa^-(s) ds),    Phi(r) = int_0^r phi,
    g(r)   = 1 - int_0^{min(r, R1)} Phi/phi / (2 Z),  Z = int_0^{R1} Phi/phi,
    f(r)   = int_0^r phi g,

together with lambda = 2 / Z and C = phi(R0) / 2.
"""
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, optimize
from scipy.integrate import IntegrationWarning
from scipy.interpolate import PchipInterpolator

from .errors import MembershipError, ProfileError
from .grids import table_grid

logger = logging.getLogger(__name__)

R1_CAP_FACTOR = 1e3
MEMBERSHIP_GRID_POINTS = 4000
SMALLEST_RADIUS = 1e-12
TABLE_ABS_TOL = 1e-14
EXACT_ASSIGNMENT_CAP = 12
DEFAULT_MIDPOINTS = 256
DEFAULT_DIRECTIONS = 64
TABLE_COLUMNS = ("r", "phi", "Phi", "g", "f", "fprime")
MODES = ("generic", "uniformly_convex")


@dataclass(frozen=True)
class MembershipReport:
    integral: float
    r_pos: Optional[float]
    reason: str = ""

    @property
    def passed(self) -> bool:
        return not self.reason


@dataclass(frozen=True, eq=False)
class ConvexityProfile:
    """Vectorised profile r -> kappa(r) with a tabulation cap.

    source is one of "analytic", "sampled" or "perturbed"; a perturbed profile keeps its
    base profile and the coefficient c of the subtracted c / r term.
    """

    fn: Callable[[np.ndarray], np.ndarray]
    source: str
    domain_cap: float
    label: str = ""
    base: Optional["ConvexityProfile"] = None
    shift: float = 0.0

    def __call__(self, r):
        r_arr = np.asarray(r, dtype=float)
        out = np.asarray(self.fn(r_arr), dtype=float)
        if out.shape != r_arr.shape:
            out = np.broadcast_to(out, r_arr.shape).copy()
        if out.ndim == 0:
            return float(out)
        return out

    def membership(self) -> MembershipReport:
        r = np.geomspace(1e-6, self.domain_cap, MEMBERSHIP_GRID_POINTS)
        values = self(r)
        bad = ~np.isfinite(values)
        if np.any(bad):
            return MembershipReport(math.nan, None, f"kappa is not finite at r={r[bad][0]:.6g}")
        mid = np.sqrt(r[:-1] * r[1:])
        jump = np.abs(self(mid) - 0.5 * (values[:-1] + values[1:]))
        allowed = 0.05 * (np.abs(values[:-1]) + np.abs(values[1:])) + 1e-6
        if np.any(jump > allowed):
            where = mid[np.argmax(jump - allowed)]
            return MembershipReport(math.nan, None, f"kappa looks discontinuous near r={where:.6g}")

        with warnings.catch_warnings():
            warnings.simplefilter("error", IntegrationWarning)
            try:
                integral, _ = integrate.quad(
                    lambda s: s * max(-self(s), 0.0), 0.0, 1.0, limit=200
                )
            except IntegrationWarning as exc:
                return MembershipReport(math.nan, None, f"int_0^1 r kappa^-(r) dr did not converge: {exc}")

        positive = values > 0
        if not positive[-1]:
            return MembershipReport(integral, None, f"kappa is not positive at the cap r={self.domain_cap:.6g}")
        nonpositive = np.nonzero(~positive)[0]
        r_pos = float(r[nonpositive[-1] + 1]) if nonpositive.size else float(r[0])
        return MembershipReport(integral, r_pos)

    def require_membership(self) -> MembershipReport:
        report = self.membership()
        if not report.passed:
            raise MembershipError(f"Profile {self.label or self.source} is not in class K: {report.reason}")
        return report

    def clipped(self, upper: float) -> "ConvexityProfile":
        source = self
        return ConvexityProfile(
            fn=lambda r: np.minimum(source(r), upper),
            source=self.source,
            domain_cap=self.domain_cap,
            label=f"min({self.label}, {upper:g})",
            base=self.base,
            shift=self.shift,
        )


def constant_profile(value: float, cap: float = 20.0) -> ConvexityProfile:
    level = float(value)
    return ConvexityProfile(
        fn=lambda r: np.full(np.shape(r), level),
        source="analytic",
        domain_cap=cap,
        label=f"kappa={level:g}",
    )


def _validate_r_grid(r_grid) -> np.ndarray:
    grid = np.asarray(r_grid, dtype=float).ravel()
    if grid.size < 2:
        raise ValueError("r-grid needs at least two points.")
    if np.any(grid <= 0):
        raise ValueError("r-grid entries must be strictly positive.")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("r-grid must be strictly increasing.")
    return grid


def sampled_infimum(
    grad: Callable[[np.ndarray], np.ndarray],
    dim: int,
    r_grid: np.ndarray,
    n_midpoints: int = DEFAULT_MIDPOINTS,
    n_directions: int = DEFAULT_DIRECTIONS,
    seed: int = 0,
) -> np.ndarray:
    """Minimum of <grad(x) - grad(y), u> / r over midpoint/direction samples with x - y = r u.

    Minimising over a finite sample can only overestimate the infimum, so the result is an
    upper bound on the true profile.
    """
    rng = np.random.default_rng([seed, dim])
    radius = 4.0 * float(r_grid[-1])
    if dim == 1:
        mids = np.linspace(-radius, radius, n_midpoints)[:, None]
        dirs = np.ones((1, 1))
    else:
        raw = rng.standard_normal((n_midpoints, dim))
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        mids = raw * radius * rng.uniform(0.0, 1.0, size=(n_midpoints, 1)) ** (1.0 / dim)
        dirs = rng.standard_normal((n_directions, dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    centres = np.repeat(mids, len(dirs), axis=0)
    units = np.tile(dirs, (len(mids), 1))
    kappa = np.empty(len(r_grid))
    for i, r in enumerate(r_grid):
        half = 0.5 * r * units
        quotient = np.sum((grad(centres + half) - grad(centres - half)) * units, axis=1) / r
        kappa[i] = quotient.min()
    return kappa


def profile_of_potential(
    potential,
    r_grid,
    n_midpoints: int = DEFAULT_MIDPOINTS,
    n_directions: int = DEFAULT_DIRECTIONS,
    seed: int = 0,
    sampled: bool = False,
) -> ConvexityProfile:
    """Convexity profile of a scenario potential.

    Builtin families carry a closed form; anything else (or sampled=True) falls back to the
    sampled infimum, interpolated monotonically on the r-grid and held constant outside it.
    Raises MembershipError when the profile is not in class K.
    """
    grid = _validate_r_grid(r_grid)
    cap = float(grid[-1])
    if potential.profile is not None and not sampled:
        profile = ConvexityProfile(
            fn=potential.profile, source="analytic", domain_cap=cap, label=potential.family
        )
    else:
        kappa = sampled_infimum(potential.grad, potential.dim, grid, n_midpoints, n_directions, seed)
        interpolant = PchipInterpolator(grid, kappa, extrapolate=False)
        lo, hi = float(grid[0]), cap
        profile = ConvexityProfile(
            fn=lambda r: interpolant(np.clip(r, lo, hi)),
            source="sampled",
            domain_cap=cap,
            label=f"{potential.family} (sampled)",
        )
    profile.require_membership()
    logger.debug("Profile %s accepted on (0, %.6g].", profile.label, cap)
    return profile


def perturbed_profile(kappa_U: ConvexityProfile, C1W: float, C_kappaU: float) -> ConvexityProfile:
    """kappa_bar(r) = kappa_U(r) - 4 C1W / (C_kappaU r), re-checked for class K membership."""
    if not 0.0 < C_kappaU <= 1.0:
        raise ValueError(f"C_kappaU must lie in (0, 1], got {C_kappaU}.")
    if C1W < 0:
        raise ValueError("C1W must be non-negative.")
    shift = 4.0 * C1W / C_kappaU
    if shift == 0.0:
        fn = kappa_U.fn
    else:
        fn = lambda r: kappa_U(r) - shift / r
    profile = ConvexityProfile(
        fn=fn,
        source="perturbed",
        domain_cap=max(kappa_U.domain_cap, 4.0 * shift),
        label=f"{kappa_U.label} - {shift:.6g}/r",
        base=kappa_U,
        shift=shift,
    )
    profile.require_membership()
    return profile


def shifted_profile(alpha: float, C1W: float, cap: float = 20.0) -> ConvexityProfile:
    """alpha - 4 C1W / r, the perturbation of a constant profile with C_kappaU = 1."""
    return perturbed_profile(constant_profile(alpha, cap), C1W, 1.0)


@dataclass(frozen=True, eq=False)
class ProfileConstants:
    R0: float
    R1: float
    Z: float
    lambda_: float
    C: float
    r: np.ndarray
    phi: np.ndarray
    Phi: np.ndarray
    g: np.ndarray
    f: np.ndarray
    fprime: np.ndarray
    mode: str = "generic"
    tol: float = 1e-10
    profile: Optional[ConvexityProfile] = None
    _interpolators: Dict[str, PchipInterpolator] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self) -> None:
        for name in TABLE_COLUMNS[1:]:
            self._interpolators[name] = PchipInterpolator(self.r, getattr(self, name), extrapolate=False)

    def evaluate(self, name: str, r):
        """Tabulated function at arbitrary r >= 0, continued linearly past the table cap."""
        if name not in self._interpolators:
            raise KeyError(f"unknown table column {name!r}")
        r_arr = np.asarray(r, dtype=float)
        if np.any(r_arr < 0):
            raise ValueError("profile tables are defined for r >= 0.")
        cap = self.r[-1]
        values = self._interpolators[name](np.minimum(r_arr, cap))
        beyond = r_arr > cap
        if np.any(beyond):
            column = getattr(self, name)
            slope = {"f": self.fprime[-1], "Phi": self.phi[-1]}.get(name, 0.0)
            values = np.where(beyond, column[-1] + slope * (r_arr - cap), values)
        return float(values) if np.ndim(values) == 0 else values

    def f_of(self, r):
        return self.evaluate("f", r)

    def table_rows(self) -> List[Tuple[float, ...]]:
        return [
            tuple(float(v) for v in row)
            for row in zip(self.r, self.phi, self.Phi, self.g, self.f, self.fprime)
        ]

    def as_dict(self) -> Dict[str, object]:
        return {
            "R0": self.R0,
            "R1": self.R1,
            "Z": self.Z,
            "lambda": self.lambda_,
            "C": self.C,
            "mode": self.mode,
            "grid": [dict(zip(TABLE_COLUMNS, row)) for row in self.table_rows()],
        }


def _locate_r0(profile: ConvexityProfile, tol: float) -> float:
    cap = profile.domain_cap
    r = np.unique(np.concatenate([np.geomspace(1e-8, cap, 8000), np.linspace(0.0, cap, 8000)[1:]]))
    negative = profile(r) < 0
    if not np.any(negative):
        return 0.0
    last = int(np.nonzero(negative)[0][-1])
    if last == len(r) - 1:
        raise ProfileError(f"kappa is negative at the tabulation cap {cap:.6g}; R0 not found.")
    return float(optimize.brentq(profile, r[last], r[last + 1], xtol=tol, maxiter=500))


def _locate_r1(profile: ConvexityProfile, R0: float, tol: float) -> float:
    """Smallest R >= R0 with inf_{r >= R} kappa(r) * R (R - R0) >= 8, by bracketing then bisection."""
    search_cap = R1_CAP_FACTOR * max(1.0, R0)
    grid = R0 + np.geomspace(1e-9 * max(1.0, R0), search_cap - R0, 6000)
    suffix_min = np.minimum.accumulate(profile(grid)[::-1])[::-1]
    excess = suffix_min * grid * (grid - R0) - 8.0
    hits = np.nonzero(excess >= 0)[0]
    if hits.size == 0:
        raise ProfileError(
            f"R1 bracket not found below cap {search_cap:.6g}; the liminf condition fails numerically."
        )
    hit = int(hits[0])
    lo = float(grid[hit - 1]) if hit > 0 else R0
    hi = float(grid[hit])

    def h(R: float) -> float:
        k = int(np.searchsorted(grid, R, side="left"))
        if k >= len(grid):
            tail = profile(R)
        else:
            tail = min(float(np.min(profile(np.linspace(R, grid[k], 9)))), float(suffix_min[k]))
        return tail * R * (R - R0) - 8.0

    return float(optimize.bisect(h, lo, hi, xtol=tol, maxiter=500))


def _integrate_tables(profile: ConvexityProfile, grid: np.ndarray, R0: float, R1: float, tol: float) -> np.ndarray:
    """Integrate the state (I, Phi, J, K) with I' = r kappa^-, Phi' = phi, J' = Phi/phi on [0, R1], K' = phi J."""

    def rhs(r: float, y: np.ndarray, before_r1: bool) -> List[float]:
        s = max(r, SMALLEST_RADIUS)
        kappa_minus = max(-profile(s), 0.0)
        phi = math.exp(-y[0] / 4.0)
        return [s * kappa_minus, phi, y[1] / phi if before_r1 else 0.0, phi * y[2]]

    breaks = sorted({0.0, R0, R1, float(grid[-1])})
    out = np.empty((4, len(grid)))
    y0 = np.zeros(4)
    out[:, 0] = y0
    for a, b in zip(breaks[:-1], breaks[1:]):
        mask = (grid >= a) & (grid <= b)
        sol = integrate.solve_ivp(
            rhs,
            (a, b),
            y0,
            method="DOP853",
            t_eval=grid[mask],
            rtol=tol,
            atol=TABLE_ABS_TOL,
            args=(b <= R1,),
        )
        if not sol.success:
            raise ProfileError(f"Quadrature of the profile tables failed on [{a:.6g}, {b:.6g}]: {sol.message}")
        out[:, mask] = sol.y
        y0 = sol.y[:, -1]
    return out


def _uniformly_convex_constants(profile: ConvexityProfile, tol: float) -> ProfileConstants:
    r_check = np.geomspace(1e-6, profile.domain_cap, MEMBERSHIP_GRID_POINTS)
    alpha = float(np.min(profile(r_check)))
    if not alpha > 0:
        raise ProfileError(f"Uniformly convex mode needs kappa >= alpha > 0; found min kappa {alpha:.6g}.")
    r = table_grid(profile.domain_cap)
    ones = np.ones_like(r)
    return ProfileConstants(
        R0=0.0,
        R1=0.0,
        Z=2.0 / alpha,
        lambda_=alpha,
        C=1.0,
        r=r,
        phi=ones,
        Phi=r.copy(),
        g=ones.copy(),
        f=r.copy(),
        fprime=ones.copy(),
        mode="uniformly_convex",
        tol=tol,
        profile=profile,
    )


def build_constants(profile: ConvexityProfile, tol: float = 1e-10, mode: str = "generic") -> ProfileConstants:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}.")
    if not 0.0 < tol <= 1e-2:
        raise ValueError("quadrature tolerance must lie in (0, 1e-2].")
    profile.require_membership()
    if mode == "uniformly_convex":
        return _uniformly_convex_constants(profile, tol)

    R0 = _locate_r0(profile, tol)
    R1 = _locate_r1(profile, R0, tol)
    cap = max(profile.domain_cap, 2.0 * R1, 1.0)
    r = table_grid(cap, must_include=(R0, R1), dense_upto=1.5 * max(R0, R1, 1.0))
    I, Phi, J, K = _integrate_tables(profile, r, R0, R1, tol)

    if R0 > 0:
        with warnings.catch_warnings():
            warnings.simplefilter("error", IntegrationWarning)
            try:
                direct, _ = integrate.quad(lambda s: s * max(-profile(s), 0.0), 0.0, R0, limit=200)
            except IntegrationWarning as exc:
                raise ProfileError(f"int_0^R0 r kappa^- dr did not converge: {exc}") from exc
        i0 = int(np.argmin(np.abs(r - R0)))
        if abs(direct - I[i0]) > 1e-6 * (1.0 + abs(direct)):
            raise ProfileError(f"Table integral {I[i0]:.10g} disagrees with quadrature {direct:.10g} at R0.")

    phi = np.exp(-I / 4.0)
    i0 = int(np.argmin(np.abs(r - R0)))
    i1 = int(np.argmin(np.abs(r - R1)))
    Z = float(J[i1])
    C = float(phi[i0] / 2.0)
    if not (C > 0 and math.isfinite(C)):
        raise ProfileError("C_kappa vanishes numerically; profile rejected.")
    if not (Z > 0 and math.isfinite(Z)):
        raise ProfileError(f"Z_kappa is not a positive number: {Z!r}.")
    g = 1.0 - J / (2.0 * Z)
    f = Phi - K / (2.0 * Z)
    constants = ProfileConstants(
        R0=R0,
        R1=R1,
        Z=Z,
        lambda_=2.0 / Z,
        C=C,
        r=r,
        phi=phi,
        Phi=Phi,
        g=g,
        f=f,
        fprime=phi * g,
        mode=mode,
        tol=tol,
        profile=profile,
    )
    logger.info(
        "Built constants for %s: R0=%.6g R1=%.6g Z=%.6g lambda=%.6g C=%.6g",
        profile.label or profile.source,
        R0,
        R1,
        Z,
        constants.lambda_,
        C,
    )
    return constants


def q_value(lambda_: float, C: float, t):
    """Non-meeting kernel: 1/(2C sqrt(pi t)) before t = 1/(2 lambda), sqrt(lambda/2pi) e^{1/2 - lambda t}/C after."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise ValueError("q_t is defined for t >= 0.")
    with np.errstate(divide="ignore"):
        small = 1.0 / (2.0 * C * np.sqrt(np.pi * t_arr))
    large = math.sqrt(lambda_ / (2.0 * math.pi)) * np.exp(0.5 - lambda_ * t_arr) / C
    out = np.where(t_arr < 1.0 / (2.0 * lambda_), small, large)
    return float(out) if out.ndim == 0 else out


def q_integral(lambda_: float, C: float) -> float:
    return math.sqrt(2.0) / (C * math.sqrt(math.pi * lambda_))


def q_kernel(constants: ProfileConstants, t):
    return q_value(constants.lambda_, constants.C, t)


def wf_distance(
    samples_a,
    samples_b,
    constants: ProfileConstants,
    mode: str = "exact",
    cap: int = EXACT_ASSIGNMENT_CAP,
) -> float:
    """W_f distance between two equal-size empirical measures.

    "exact" solves the assignment problem over the cost f(|x - y|); "monotone" pairs sorted 1-d
    samples, which is one admissible coupling and hence an upper bound.
    """
    a = np.asarray(samples_a, dtype=float)
    b = np.asarray(samples_b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}.")
    if len(a) != len(b) or len(a) == 0:
        raise ValueError("wf_distance needs two non-empty samples of equal size.")
    if mode == "exact":
        if len(a) > cap:
            raise ValueError(f"exact mode is capped at n={cap}, got n={len(a)}.")
        cost = constants.f_of(np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1))
        rows, cols = optimize.linear_sum_assignment(cost)
        return float(cost[rows, cols].mean())
    if mode == "monotone":
        if a.shape[1] != 1:
            raise ValueError("monotone mode is one-dimensional.")
        gaps = np.abs(np.sort(a[:, 0]) - np.sort(b[:, 0]))
        return float(np.mean(constants.f_of(gaps)))
    raise ValueError(f"unknown mode {mode!r}.")


@dataclass(frozen=True)
class InequalityCheck:
    name: str
    worst: float
    at: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance


def check_equivalence(constants: ProfileConstants, tolerance: float = 1e-8) -> InequalityCheck:
    """C r <= f <= r, C <= f' <= 1, f' non-increasing and g in [1/2, 1] non-increasing."""
    c = constants
    excesses = [
        c.C * c.r - c.f,
        c.f - c.r,
        c.C - c.fprime,
        c.fprime - 1.0,
        c.g - 1.0,
        np.concatenate([[0.0], np.diff(c.fprime)]),
        np.concatenate([[0.0], np.diff(c.g)]),
    ]
    stacked = np.vstack(excesses)
    worst_per_node = stacked.max(axis=0)
    k = int(np.argmax(worst_per_node))
    return InequalityCheck("equivalence", float(worst_per_node[k]), float(c.r[k]), tolerance)


def check_differential_inequality(constants: ProfileConstants, tolerance: Optional[float] = None) -> InequalityCheck:
    """4 f'' - r kappa f' <= -lambda f at every interior node, f'' from the tabulated f'."""
    c = constants
    if c.profile is None:
        raise ValueError("constants carry no profile to check against.")
    tolerance = 1e-6 + 1e3 * c.tol if tolerance is None else tolerance
    fpp = np.gradient(c.fprime, c.r)
    interior = slice(1, len(c.r) - 1)
    r = c.r[interior]
    lhs = 4.0 * fpp[interior] - r * c.profile(r) * c.fprime[interior]
    excess = lhs + c.lambda_ * c.f[interior]
    k = int(np.argmax(excess))
    return InequalityCheck("differential_inequality", float(excess[k]), float(r[k]), tolerance)


def profile_grid(cap: float, points: int = 200) -> np.ndarray:
    return np.geomspace(1e-3, cap, points)
