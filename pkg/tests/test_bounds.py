import math
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from coupling_lab.bounds import (
    ENVELOPE_HEADER,
    LIPSCHITZ_CASES,
    BoundInputs,
    build_bound_report,
    exp_difference,
    fms_comparison,
    gradient_envelope,
    hessian_envelope,
    hessian_envelope_tau,
    lemma_a1_integrals,
    lipschitz_bound,
)
from coupling_lab.errors import BoundError
from coupling_lab.profiles import q_kernel


@pytest.fixture
def eq2_inputs(kappa_bar_constants):
    return BoundInputs(
        C1W=0.5,
        C3U=0.0,
        alpha=1.0,
        lambda_bar=kappa_bar_constants.lambda_,
        C_bar=kappa_bar_constants.C,
        mode="uniformly_convex",
    )


@pytest.fixture
def generic_inputs(kappa_bar_constants):
    return BoundInputs(
        C1W=0.5,
        C2U=1.0,
        C3U=1.0,
        alpha=1.0,
        lambda_U=0.5,
        C_U=0.5,
        lambda_bar=kappa_bar_constants.lambda_,
        C_bar=kappa_bar_constants.C,
    )


class TestGradientEnvelope:
    def test_zero_perturbation(self):
        assert gradient_envelope(BoundInputs(C1W=0.0), 0.0, 3.0) == 0.0

    def test_uniformly_convex(self):
        inputs = BoundInputs(C1W=0.5, alpha=1.0, mode="uniformly_convex")
        assert gradient_envelope(inputs, 1.0, 2.0) == pytest.approx(0.183940, rel=1e-5)

    def test_generic(self):
        inputs = BoundInputs(C1W=0.5, lambda_U=0.5, C_U=0.5)
        assert gradient_envelope(inputs, 0.0, 1.0) == pytest.approx(0.606531, rel=1e-5)

    def test_vectorized_and_terminal(self):
        inputs = BoundInputs(C1W=0.5, lambda_U=0.5, C_U=0.5)
        values = gradient_envelope(inputs, np.array([0.0, 4.0]), 4.0)
        assert values[1] == pytest.approx(1.0)
        assert values[0] < values[1]

    def test_missing_constants(self):
        with pytest.raises(BoundError, match="lambda_U"):
            gradient_envelope(BoundInputs(C1W=0.5), 0.0, 1.0)

    def test_uniformly_convex_needs_positive_alpha(self):
        with pytest.raises(BoundError):
            gradient_envelope(BoundInputs(C1W=0.5, alpha=0.0), 0.0, 1.0, mode="uniformly_convex")

    def test_time_past_horizon(self):
        with pytest.raises(ValueError):
            gradient_envelope(BoundInputs(C1W=0.5, alpha=1.0), 2.0, 1.0, mode="uniformly_convex")

    @pytest.mark.parametrize("alpha,lambda_U,C_U", [(0.5, 0.5, 0.5), (1.0, 0.5, 0.5), (2.0, 1.0, 0.3)])
    def test_uniformly_convex_is_sharper(self, alpha, lambda_U, C_U):
        inputs = BoundInputs(C1W=0.5, alpha=alpha, lambda_U=lambda_U, C_U=C_U)
        t = np.linspace(0.0, 5.0, 21)
        sharp = gradient_envelope(inputs, t, 5.0, mode="uniformly_convex")
        generic = gradient_envelope(inputs, t, 5.0, mode="generic")
        assert np.all(sharp <= generic)


class TestHessianEnvelope:
    @pytest.mark.parametrize("case", ["A2", "A2prime", "A2prime-positive-alpha"])
    def test_zero_perturbation(self, case):
        assert hessian_envelope(BoundInputs(C1W=0.0), 0.0, 2.0, case) == 0.0

    def test_positive_alpha_closed_form(self, eq2_inputs, kappa_bar_constants):
        expected = math.exp(-2.0) * q_kernel(kappa_bar_constants, 2.0)
        assert hessian_envelope(eq2_inputs, 0.0, 2.0, "A2prime-positive-alpha") == pytest.approx(expected, rel=1e-12)

    def test_general_displays_term_for_term(self, generic_inputs, kappa_bar_constants):
        lam, C, tau = kappa_bar_constants.lambda_, kappa_bar_constants.C, 3.0
        a = 0.5 / (2.0 * lam)
        conv = math.exp(a) * (
            math.exp(-0.5 * tau) / (2.0 * math.sqrt(math.pi) * lam * C)
            + math.sqrt(lam) * (math.exp(-lam * tau) - math.exp(-0.5 * tau)) / ((0.5 - lam) * math.sqrt(math.pi) * C)
        )
        q = float(q_kernel(kappa_bar_constants, tau))
        a2 = 2.0 * 0.5 * ((1.0 / 0.5) * conv + q)
        drift = (math.exp(-lam * tau) - math.exp(-0.5 * tau)) / ((0.5 - lam) * C)
        a2prime = (0.5 / 0.5) * (drift + 2.0 * conv) + 2.0 * 0.5 * q
        assert hessian_envelope_tau(generic_inputs, tau, "A2") == pytest.approx(a2, rel=1e-9)
        assert hessian_envelope_tau(generic_inputs, tau, "A2") == pytest.approx(23.4920, rel=1e-3)
        assert hessian_envelope_tau(generic_inputs, tau, "A2prime") == pytest.approx(a2prime, rel=1e-9)

    @pytest.mark.parametrize("case", ["A2", "A2prime", "A2prime-positive-alpha"])
    def test_vanishes_far_from_horizon(self, generic_inputs, case):
        assert hessian_envelope_tau(generic_inputs, 5000.0, case) < 1e-12

    def test_positive_alpha_improves_general_case(self, generic_inputs):
        tau = np.linspace(0.05, 20.0, 80)
        improved = hessian_envelope_tau(generic_inputs, tau, "A2prime-positive-alpha")
        general = hessian_envelope_tau(generic_inputs, tau, "A2prime")
        assert np.all(improved <= general)

    def test_missing_constants(self):
        with pytest.raises(BoundError, match="C2U"):
            hessian_envelope(BoundInputs(C1W=0.5), 0.0, 1.0, "A2")

    def test_unknown_case(self, generic_inputs):
        with pytest.raises(ValueError):
            hessian_envelope(generic_inputs, 0.0, 1.0, "A4")


class TestExpDifference:
    def test_degenerate_rates_use_limit(self):
        assert exp_difference(0.5, 0.5, 2.0) == pytest.approx(2.0 * math.exp(-1.0))

    def test_continuous_across_degeneracy(self):
        assert exp_difference(0.5, 0.5 + 1e-7, 2.0) == pytest.approx(2.0 * math.exp(-1.0), rel=1e-6)

    def test_symmetric(self):
        assert exp_difference(0.3, 1.2, 1.5) == pytest.approx(exp_difference(1.2, 0.3, 1.5))


class TestLipschitzBound:
    @pytest.mark.parametrize("case", LIPSCHITZ_CASES)
    def test_zero_perturbation(self, case):
        assert lipschitz_bound(BoundInputs(C1W=0.0), case).value == 1.0

    def test_positive_alpha_display(self, eq2_inputs, kappa_bar_constants):
        lam, C = kappa_bar_constants.lambda_, kappa_bar_constants.C
        printed = (0.5 / C) * (
            math.sqrt(2.0) / math.sqrt(math.pi * lam) + math.sqrt(2.0 * lam) / math.sqrt(math.pi * math.e * (1.0 + lam))
        )
        bound = lipschitz_bound(eq2_inputs, "Thm2.3-eq2")
        assert bound.exponent == pytest.approx(printed, rel=1e-12)
        assert bound.exponent == pytest.approx(3.66218, rel=1e-5)
        assert bound.consistent
        assert bound.value >= 1.0

    def test_positive_alpha_gap_to_quadrature(self, eq2_inputs):
        bound = lipschitz_bound(eq2_inputs, "Thm2.3-eq2")
        assert bound.quadrature_exponent == pytest.approx(1.64830, rel=1e-4)
        assert bound.derived_exponent == pytest.approx(3.38887, rel=1e-4)
        assert bound.relative_gap == pytest.approx(1.2218, rel=1e-3)

    def test_general_displays_below_one_rate_are_inconsistent(self, generic_inputs):
        for case in ("Thm2.3-i", "Thm2.3-ii"):
            bound = lipschitz_bound(generic_inputs, case, strict=False)
            assert not bound.consistent
            assert bound.quadrature_exponent > bound.exponent
            with pytest.raises(BoundError, match="exceeds"):
                lipschitz_bound(generic_inputs, case)

    def test_zero_alpha_general_display_matches_quadrature(self, generic_inputs):
        bound = lipschitz_bound(replace(generic_inputs, alpha=0.0), "Thm2.3-ii")
        assert bound.consistent
        assert bound.quadrature_exponent == pytest.approx(bound.exponent, rel=1e-7)

    @pytest.mark.parametrize("name", ["C1W", "C3U"])
    def test_monotone_in_constants(self, generic_inputs, name):
        base = getattr(generic_inputs, name)
        values = [
            lipschitz_bound(replace(generic_inputs, **{name: base * s}), "Thm2.3-ii", strict=False).exponent
            for s in (1, 2, 4)
        ]
        assert values == sorted(values)

    def test_monotone_in_C2U(self, generic_inputs):
        values = [
            lipschitz_bound(replace(generic_inputs, C2U=c), "Thm2.3-i", strict=False).exponent for c in (0.5, 1.0, 3.0)
        ]
        assert values == sorted(values)

    def test_unknown_case(self, generic_inputs):
        with pytest.raises(ValueError):
            lipschitz_bound(generic_inputs, "Thm9")

    def test_positive_alpha_case_needs_alpha(self, eq2_inputs):
        with pytest.raises(BoundError):
            lipschitz_bound(replace(eq2_inputs, alpha=0.0), "Thm2.3-eq2")

    def test_as_dict_reports_log_scale(self, eq2_inputs):
        payload = lipschitz_bound(eq2_inputs, "Thm2.3-eq2").as_dict()
        assert payload["value"] == pytest.approx(math.exp(payload["log_value"]))
        assert payload["consistent"] is True

    def test_report_keeps_inconsistent_cases(self, generic_inputs):
        report = build_bound_report(generic_inputs, "A2prime", "Thm2.3-ii", 4.0)
        assert set(report.lipschitz) == set(LIPSCHITZ_CASES)
        assert not report.lipschitz["Thm2.3-i"].consistent
        assert report.lipschitz["Thm2.3-eq2"].consistent


class TestLemmaIntegrals:
    def test_kernel_total(self):
        checks = {c.name: c for c in lemma_a1_integrals(0.5, 0.5, 0.5, 0.0, 0.0, 1.0)}
        total = checks["kernel_total"]
        assert total.closed_form == pytest.approx(2.256758, rel=1e-6)
        assert total.quadrature == pytest.approx(total.closed_form, rel=1e-6)

    def test_undiscounted_kernel_matches_total(self):
        checks = {c.name: c for c in lemma_a1_integrals(0.5, 0.5, 0.5, 0.0, 0.0, 1.0)}
        assert checks["discounted_kernel"].closed_form == pytest.approx(checks["kernel_total"].closed_form)

    def test_empty_window(self):
        conv = lemma_a1_integrals(1.0, 0.5, 0.5, 0.0, 2.0, 2.0)[0]
        assert conv.quadrature == 0.0
        assert conv.closed_form >= 0.0

    @pytest.mark.parametrize("lambda_bar", [0.2, 0.5, 1.0])
    @pytest.mark.parametrize("rate", [0.3, 1.0, 2.0])
    def test_closed_forms_dominate(self, lambda_bar, rate):
        checks = lemma_a1_integrals(rate, lambda_bar, 0.4, rate, 0.0, 3.0)
        assert all(check.passed for check in checks)

    def test_negative_alpha(self):
        with pytest.raises(ValueError):
            lemma_a1_integrals(0.5, 0.5, 0.5, -1.0, 0.0, 1.0)


class TestComparisonConstant:
    def test_value(self):
        assert fms_comparison(0.5, 1.0, 0.0) == pytest.approx(1808.04, rel=1e-5)

    def test_zero_perturbation(self):
        assert fms_comparison(0.0, 1.0, 2.0) == 1.0

    def test_needs_positive_alpha(self):
        with pytest.raises(BoundError):
            fms_comparison(0.5, 0.0, 0.0)


class TestBoundReport:
    def test_report_contents(self, eq2_inputs):
        report = build_bound_report(eq2_inputs, "A2prime-positive-alpha", "Thm2.3-eq2", horizon=4.0, n_times=11)
        rows = report.envelope_rows()
        assert len(rows) == 11
        assert len(rows[0]) == len(ENVELOPE_HEADER)
        assert rows[-1][1] == pytest.approx(0.5)
        assert all(r[1] >= 0 and r[2] >= 0 for r in rows)
        assert all(check.passed for check in report.lemma_checks)
        payload = report.as_dict()
        assert payload["lip_S"] == payload["lip_T"] >= 1.0
        assert payload["fms_comparison"] == pytest.approx(math.exp(7.5))

    def test_zero_perturbation_report(self):
        report = build_bound_report(BoundInputs(C1W=0.0, alpha=1.0, mode="uniformly_convex"), "A2", "Thm2.3-i", 2.0)
        assert report.headline.value == 1.0
        assert_allclose(report.gradient, 0.0)
        assert_allclose(report.hessian, 0.0)
