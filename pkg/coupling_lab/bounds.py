"""Closed-form gradient, Hessian and Lipschitz bounds for the Langevin transport map.

Every envelope is written in terms of tau = T - t and the non-meeting kernel q of the
perturbed profile. Lipschitz constants are exp of the time integral of the Hessian envelope;
each closed form is cross-checked against adaptive quadrature of the same envelope.
"""
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy import integrate
from scipy.integrate import IntegrationWarning

from .errors import BoundError
from .profiles import ProfileConstants, q_integral, q_value

logger = logging.getLogger(__name__)

HESSIAN_CASES = ("A2", "A2prime", "A2prime-positive-alpha")
LIPSCHITZ_CASES = ("Thm2.3-i", "Thm2.3-ii", "Thm2.3-eq2")
CASE_FOR_LIPSCHITZ = {"Thm2.3-i": "A2", "Thm2.3-ii": "A2prime", "Thm2.3-eq2": "A2prime-positive-alpha"}
CASE_REQUIREMENTS = {
    "A2": ("C2U", "lambda_U", "C_U", "lambda_bar", "C_bar"),
    "A2prime": ("alpha", "C3U", "lambda_U", "C_U", "lambda_bar", "C_bar"),
    "A2prime-positive-alpha": ("alpha", "C3U", "lambda_bar", "C_bar"),
}
ENVELOPE_HEADER = ("t", "grad_env", "hess_env")
DEGENERATE_RATE_GAP = 1e-10
QUADRATURE_LIMIT = 400
MAX_EXPONENT = 700.0


@dataclass(frozen=True)
class BoundInputs:
    C1W: float
    C2U: Optional[float] = None
    C3U: Optional[float] = None
    alpha: Optional[float] = None
    lambda_U: Optional[float] = None
    C_U: Optional[float] = None
    lambda_bar: Optional[float] = None
    C_bar: Optional[float] = None
    mode: str = "generic"

    @classmethod
    def from_constants(
        cls,
        C1W: float,
        constants_U: Optional[ProfileConstants],
        constants_bar: Optional[ProfileConstants],
        potential=None,
        mode: Optional[str] = None,
    ) -> "BoundInputs":
        return cls(
            C1W=float(C1W),
            C2U=getattr(potential, "C2U", None),
            C3U=getattr(potential, "C3U", None),
            alpha=getattr(potential, "alpha", None),
            lambda_U=None if constants_U is None else constants_U.lambda_,
            C_U=None if constants_U is None else constants_U.C,
            lambda_bar=None if constants_bar is None else constants_bar.lambda_,
            C_bar=None if constants_bar is None else constants_bar.C,
            mode=mode or (constants_U.mode if constants_U is not None else "generic"),
        )

    def require(self, names, what: str) -> None:
        missing = [name for name in names if getattr(self, name) is None]
        if missing:
            raise BoundError(f"{what} needs {', '.join(missing)}.")

    def as_dict(self) -> Dict[str, object]:
        return {
            "C1W": self.C1W,
            "C2U": self.C2U,
            "C3U": self.C3U,
            "alpha": self.alpha,
            "lambda_kappa_U": self.lambda_U,
            "C_kappa_U": self.C_U,
            "lambda_kappa_bar": self.lambda_bar,
            "C_kappa_bar": self.C_bar,
            "mode": self.mode,
        }


def _time_to_go(t, T) -> np.ndarray:
    tau = np.asarray(T - np.asarray(t, dtype=float), dtype=float)
    if np.any(tau < 0):
        raise ValueError("envelopes need t <= T.")
    return tau


def _scalar(values):
    return float(values) if np.ndim(values) == 0 else values


def exp_difference(rate_low: float, rate_high: float, tau):
    """(e^{-rate_low tau} - e^{-rate_high tau}) / (rate_high - rate_low), tau e^{-rate tau} in the limit."""
    tau = np.asarray(tau, dtype=float)
    gap = rate_high - rate_low
    if abs(gap) < DEGENERATE_RATE_GAP * max(abs(rate_low), 1e-300):
        return tau * np.exp(-rate_low * tau)
    return np.exp(-rate_low * tau) * (-np.expm1(-gap * tau)) / gap


def kernel_convolution_bound(lambda_U: float, lambda_bar: float, C_bar: float, tau):
    """Upper bound on int_0^tau e^{-lambda_U (tau - s)} q_s ds, split at s* = 1/(2 lambda_bar)."""
    a = lambda_U / (2.0 * lambda_bar)
    tau = np.asarray(tau, dtype=float)
    head = math.exp(a) * np.exp(-lambda_U * tau) / (C_bar * math.sqrt(2.0 * math.pi * lambda_bar))
    tail = math.sqrt(lambda_bar / (2.0 * math.pi)) * math.exp(0.5) * exp_difference(lambda_bar, lambda_U, tau) / C_bar
    return head + tail


def displayed_convolution_term(lambda_U: float, lambda_bar: float, C_bar: float, tau):
    """The bracketed convolution term of the general Hessian bounds, taken as displayed.

    e^a (e^{-lambda_U tau} / (2 sqrt(pi) lambda_bar C_bar)
    + sqrt(lambda_bar) (e^{-lambda_bar tau} - e^{-lambda_U tau}) / ((lambda_U - lambda_bar) sqrt(pi) C_bar)),
    with a = lambda_U / (2 lambda_bar).
    """
    a = lambda_U / (2.0 * lambda_bar)
    tau = np.asarray(tau, dtype=float)
    head = np.exp(-lambda_U * tau) / (2.0 * math.sqrt(math.pi) * lambda_bar * C_bar)
    tail = math.sqrt(lambda_bar) * exp_difference(lambda_bar, lambda_U, tau) / (math.sqrt(math.pi) * C_bar)
    return math.exp(a) * (head + tail)


def discounted_kernel_bound(alpha: float, lambda_bar: float, C_bar: float) -> float:
    """Upper bound on int_0^inf e^{-alpha t} q_t dt; exact when alpha = 0."""
    short = 1.0 / (C_bar * math.sqrt(2.0 * math.pi * lambda_bar))
    long = math.sqrt(lambda_bar) * math.exp(-alpha / (2.0 * lambda_bar)) / (
        C_bar * math.sqrt(2.0 * math.pi) * (alpha + lambda_bar)
    )
    return short + long


def gradient_envelope(inputs: BoundInputs, t, T, mode: Optional[str] = None):
    mode = mode or inputs.mode
    tau = _time_to_go(t, T)
    if inputs.C1W == 0:
        return _scalar(np.zeros_like(tau))
    if mode == "uniformly_convex":
        inputs.require(("alpha",), "the uniformly convex gradient envelope")
        if not inputs.alpha > 0:
            raise BoundError(f"uniformly convex mode needs alpha > 0, got {inputs.alpha}.")
        return _scalar(inputs.C1W * np.exp(-inputs.alpha * tau))
    if mode == "generic":
        inputs.require(("lambda_U", "C_U"), "the generic gradient envelope")
        return _scalar(inputs.C1W * np.exp(-inputs.lambda_U * tau) / inputs.C_U)
    raise ValueError(f"unknown gradient envelope mode {mode!r}.")


def hessian_envelope_tau(inputs: BoundInputs, tau, case: str):
    if case not in HESSIAN_CASES:
        raise ValueError(f"case must be one of {HESSIAN_CASES}, got {case!r}.")
    tau = np.asarray(tau, dtype=float)
    if inputs.C1W == 0:
        return np.zeros_like(tau)
    inputs.require(CASE_REQUIREMENTS[case], f"Hessian case {case}")
    c = inputs
    q = q_value(c.lambda_bar, c.C_bar, tau)
    if case == "A2prime-positive-alpha":
        if not c.alpha > 0:
            raise BoundError(f"case {case} needs alpha > 0, got {c.alpha}.")
        drift = c.C3U * exp_difference(c.lambda_bar, 2.0 * c.alpha, tau) / c.C_bar
        return c.C1W * (drift + 2.0 * np.exp(-c.alpha * tau) * q)
    conv = displayed_convolution_term(c.lambda_U, c.lambda_bar, c.C_bar, tau)
    if case == "A2":
        return 2.0 * c.C1W * ((c.C2U / c.C_U) * conv + q)
    inner = c.C3U * exp_difference(c.lambda_bar, c.lambda_U, tau) / c.C_bar + 2.0 * abs(c.alpha) * conv
    return (c.C1W / c.C_U) * inner + 2.0 * c.C1W * q


def hessian_envelope(inputs: BoundInputs, t, T, case: str):
    return _scalar(hessian_envelope_tau(inputs, _time_to_go(t, T), case))


def _quad(fn: Callable[[float], float], lo: float, hi: float, what: str) -> float:
    with warnings.catch_warnings():
        warnings.simplefilter("error", IntegrationWarning)
        try:
            value, _ = integrate.quad(fn, lo, hi, limit=QUADRATURE_LIMIT, epsabs=1e-12, epsrel=1e-10)
        except IntegrationWarning as exc:
            raise BoundError(f"quadrature of {what} did not converge: {exc}") from exc
    return float(value)


def integrate_singular(fn: Callable[[float], float], lambda_bar: float, upper: float, what: str) -> float:
    """int_0^upper fn for integrands with a 1/sqrt(t) singularity at 0, substituting t = u^2 before s*."""
    split = min(upper, 1.0 / (2.0 * lambda_bar))
    total = _quad(lambda u: 2.0 * u * fn(u * u), 0.0, math.sqrt(split), what)
    if upper > split:
        total += _quad(fn, split, upper, what)
    return total


def _safe_exp(x: float) -> float:
    return math.inf if x > MAX_EXPONENT else math.exp(x)


def _printed_exponent(inputs: BoundInputs, case: str) -> float:
    c = inputs
    lb, Cb = c.lambda_bar, c.C_bar
    if case == "Thm2.3-i":
        a = c.lambda_U / (2.0 * lb)
        return (2.0 * c.C1W / (math.sqrt(math.pi * lb) * Cb)) * (
            3.0 * math.exp(a) * c.C2U / (2.0 * c.lambda_U * c.C_U) + math.sqrt(2.0)
        )
    if case == "Thm2.3-ii":
        a = c.lambda_U / (2.0 * lb)
        return (c.C1W / Cb) * (
            c.C3U / (c.lambda_U * lb * c.C_U)
            + 3.0 * abs(c.alpha) * math.exp(a) / (2.0 * math.sqrt(math.pi * lb) * c.lambda_U * c.C_U)
            + 2.0 * math.sqrt(2.0) / math.sqrt(math.pi * lb)
        )
    return (c.C1W / Cb) * (
        c.C3U / (2.0 * lb * c.alpha)
        + math.sqrt(2.0) / math.sqrt(math.pi * lb)
        + math.sqrt(2.0 * lb) / math.sqrt(math.pi * math.e * (c.alpha + lb))
    )


def _derived_exponent(inputs: BoundInputs, case: str) -> float:
    """Exact integral over [0, inf) of the Hessian envelope rebuilt from the tighter kernel bounds."""
    c = inputs
    lb, Cb = c.lambda_bar, c.C_bar
    kernel_total = q_integral(lb, Cb)
    if case == "Thm2.3-eq2":
        return c.C1W * c.C3U / (Cb * 2.0 * c.alpha * lb) + 2.0 * c.C1W * discounted_kernel_bound(c.alpha, lb, Cb)
    a = c.lambda_U / (2.0 * lb)
    conv_total = (math.exp(a) + math.exp(0.5)) / (Cb * c.lambda_U * math.sqrt(2.0 * math.pi * lb))
    if case == "Thm2.3-i":
        return 2.0 * c.C1W * ((c.C2U / c.C_U) * conv_total + kernel_total)
    return (c.C1W / c.C_U) * (c.C3U / (Cb * c.lambda_U * lb) + 2.0 * abs(c.alpha) * conv_total) + 2.0 * c.C1W * kernel_total


@dataclass(frozen=True)
class LipschitzBound:
    """exp(exponent) bounds Lip(S) and Lip(T); exponent is the displayed closed form.

    derived_exponent integrates the tighter kernel bounds and is reported for comparison only.
    """

    case: str
    exponent: float
    derived_exponent: float
    quadrature_exponent: float

    @property
    def consistent(self) -> bool:
        return self.quadrature_exponent <= self.exponent * (1 + 1e-8) + 1e-12

    @property
    def value(self) -> float:
        return _safe_exp(self.exponent)

    @property
    def log_value(self) -> float:
        return self.exponent

    @property
    def quadrature_value(self) -> float:
        return _safe_exp(self.quadrature_exponent)

    @property
    def relative_gap(self) -> float:
        if self.quadrature_exponent <= 0:
            return 0.0
        return self.exponent / self.quadrature_exponent - 1.0

    def as_dict(self) -> Dict[str, object]:
        return {
            "case": self.case,
            "value": self.value,
            "log_value": self.log_value,
            "derived_log_value": self.derived_exponent,
            "quadrature_log_value": self.quadrature_exponent,
            "quadrature_value": self.quadrature_value,
            "relative_gap": self.relative_gap,
            "consistent": self.consistent,
        }


def integrated_envelope(inputs: BoundInputs, hessian_case: str) -> float:
    if inputs.C1W == 0:
        return 0.0
    return integrate_singular(
        lambda tau: float(hessian_envelope_tau(inputs, tau, hessian_case)),
        inputs.lambda_bar,
        math.inf,
        f"the {hessian_case} Hessian envelope",
    )


def lipschitz_bound(inputs: BoundInputs, case: str, strict: bool = True) -> LipschitzBound:
    """Lipschitz constant of both S and T for the given case.

    The exponent is the displayed closed form. Quadrature of the displayed Hessian envelope is
    checked against it: with strict a shortfall raises BoundError, otherwise it is logged and
    the bound comes back with consistent == False.
    """
    if case not in LIPSCHITZ_CASES:
        raise ValueError(f"case must be one of {LIPSCHITZ_CASES}, got {case!r}.")
    if inputs.C1W == 0:
        return LipschitzBound(case, 0.0, 0.0, 0.0)
    hessian_case = CASE_FOR_LIPSCHITZ[case]
    inputs.require(CASE_REQUIREMENTS[hessian_case], f"Lipschitz case {case}")
    if hessian_case == "A2prime-positive-alpha" and not inputs.alpha > 0:
        raise BoundError(f"case {case} needs alpha > 0, got {inputs.alpha}.")
    bound = LipschitzBound(
        case,
        exponent=_printed_exponent(inputs, case),
        derived_exponent=_derived_exponent(inputs, case),
        quadrature_exponent=integrated_envelope(inputs, hessian_case),
    )
    if not bound.consistent:
        message = (
            f"quadrature {bound.quadrature_exponent:.10g} of the {hessian_case} envelope exceeds "
            f"the closed form {bound.exponent:.10g} for {case}."
        )
        if strict:
            raise BoundError(message)
        logger.warning("%s", message)
    return bound


@dataclass(frozen=True)
class IntegralCheck:
    name: str
    closed_form: float
    quadrature: float
    exact: bool = False
    rtol: float = 1e-6

    @property
    def residual(self) -> float:
        return self.closed_form - self.quadrature

    @property
    def passed(self) -> bool:
        slack = 1e-8 * max(1.0, abs(self.closed_form))
        if self.exact:
            return abs(self.residual) <= self.rtol * abs(self.closed_form) + 1e-14
        return self.quadrature <= self.closed_form + slack

    def as_dict(self) -> Dict[str, object]:
        return {
            "name": self.name,
            "closed_form": self.closed_form,
            "quadrature": self.quadrature,
            "residual": self.residual,
            "passed": self.passed,
        }


def lemma_a1_integrals(
    lambda_U: float,
    lambda_bar: float,
    C_bar: float,
    alpha: float,
    t: float,
    T: float,
) -> List[IntegralCheck]:
    """The three kernel integrals behind the Lipschitz constants, closed form against quadrature."""
    if T < t:
        raise ValueError("need t <= T.")
    if alpha < 0:
        raise ValueError("the discounted kernel integral needs alpha >= 0.")
    tau = T - t

    def convolution_integrand(s: float) -> float:
        return math.exp(-lambda_U * (tau - s)) * q_value(lambda_bar, C_bar, s)

    conv = 0.0
    if tau > 0:
        conv = integrate_singular(convolution_integrand, lambda_bar, tau, "the kernel convolution")
    discounted = integrate_singular(
        lambda s: math.exp(-alpha * s) * q_value(lambda_bar, C_bar, s), lambda_bar, math.inf, "the discounted kernel"
    )
    total = integrate_singular(lambda s: q_value(lambda_bar, C_bar, s), lambda_bar, math.inf, "the kernel")
    checks = [
        IntegralCheck("kernel_convolution", float(kernel_convolution_bound(lambda_U, lambda_bar, C_bar, tau)), conv),
        IntegralCheck("discounted_kernel", discounted_kernel_bound(alpha, lambda_bar, C_bar), discounted),
        IntegralCheck("kernel_total", q_integral(lambda_bar, C_bar), total, exact=True),
    ]
    for check in checks:
        if not check.passed:
            raise BoundError(
                f"{check.name}: quadrature {check.quadrature:.10g} violates closed form {check.closed_form:.10g}."
            )
    return checks


def fms_comparison(C1W: float, alpha: Optional[float], C3U: Optional[float]) -> float:
    """exp(10 C1W (1/sqrt(alpha) + C1W/alpha + C3U/alpha^2)), the competing uniformly convex constant."""
    if alpha is None or not alpha > 0:
        raise BoundError(f"the comparison constant needs alpha > 0, got {alpha}.")
    c3 = 0.0 if C3U is None else C3U
    return _safe_exp(10.0 * C1W * (1.0 / math.sqrt(alpha) + C1W / alpha + c3 / alpha**2))


@dataclass
class BoundReport:
    inputs: BoundInputs
    hessian_case: str
    lipschitz_case: str
    horizon: float
    times: np.ndarray
    gradient: np.ndarray
    hessian: np.ndarray
    lipschitz: Dict[str, LipschitzBound] = field(default_factory=dict)
    fms: Optional[float] = None
    lemma_checks: List[IntegralCheck] = field(default_factory=list)

    @property
    def headline(self) -> LipschitzBound:
        return self.lipschitz[self.lipschitz_case]

    def envelope_rows(self) -> List[Tuple[float, float, float]]:
        return [(float(t), float(g), float(h)) for t, g, h in zip(self.times, self.gradient, self.hessian)]

    def as_dict(self) -> Dict[str, object]:
        return {
            "inputs": self.inputs.as_dict(),
            "hessian_case": self.hessian_case,
            "lipschitz_case": self.lipschitz_case,
            "horizon": self.horizon,
            "lipschitz": {name: bound.as_dict() for name, bound in sorted(self.lipschitz.items())},
            "lip_S": self.headline.value,
            "lip_T": self.headline.value,
            "fms_comparison": self.fms,
            "lemma_checks": [check.as_dict() for check in self.lemma_checks],
        }


def _evaluable(inputs: BoundInputs, lipschitz_case: str) -> bool:
    if inputs.C1W == 0:
        return True
    hessian_case = CASE_FOR_LIPSCHITZ[lipschitz_case]
    if any(getattr(inputs, name) is None for name in CASE_REQUIREMENTS[hessian_case]):
        return False
    return hessian_case != "A2prime-positive-alpha" or inputs.alpha > 0


def build_bound_report(
    inputs: BoundInputs,
    hessian_case: str,
    lipschitz_case: str,
    horizon: float,
    n_times: int = 101,
) -> BoundReport:
    """Envelopes on [0, horizon] plus every Lipschitz case the inputs can evaluate."""
    times = np.linspace(0.0, horizon, n_times)
    lipschitz = {
        case: lipschitz_bound(inputs, case, strict=False) for case in LIPSCHITZ_CASES if _evaluable(inputs, case)
    }
    if lipschitz_case not in lipschitz:
        lipschitz[lipschitz_case] = lipschitz_bound(inputs, lipschitz_case, strict=False)
    fms = None
    if inputs.alpha is not None and inputs.alpha > 0:
        fms = fms_comparison(inputs.C1W, inputs.alpha, inputs.C3U)
    lemma_checks: List[IntegralCheck] = []
    if inputs.lambda_bar is not None and inputs.C_bar is not None:
        lemma_checks = lemma_a1_integrals(
            inputs.lambda_U if inputs.lambda_U is not None else inputs.lambda_bar,
            inputs.lambda_bar,
            inputs.C_bar,
            max(inputs.alpha or 0.0, 0.0),
            0.0,
            horizon,
        )
    report = BoundReport(
        inputs=inputs,
        hessian_case=hessian_case,
        lipschitz_case=lipschitz_case,
        horizon=horizon,
        times=times,
        gradient=np.asarray(gradient_envelope(inputs, times, horizon)),
        hessian=np.asarray(hessian_envelope(inputs, times, horizon, hessian_case)),
        lipschitz=lipschitz,
        fms=fms,
        lemma_checks=lemma_checks,
    )
    logger.info(
        "Lipschitz bound %s = exp(%.6g) (integrated envelope %.6g); comparison constant %s.",
        lipschitz_case,
        report.headline.exponent,
        report.headline.quadrature_exponent,
        "n/a" if fms is None else f"{fms:.6g}",
    )
    return report
