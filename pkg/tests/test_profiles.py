import itertools
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from coupling_lab.errors import MembershipError
from coupling_lab.profiles import (
    TABLE_COLUMNS,
    build_constants,
    check_differential_inequality,
    check_equivalence,
    constant_profile,
    perturbed_profile,
    profile_grid,
    profile_of_potential,
    q_integral,
    q_value,
    shifted_profile,
    wf_distance,
)
from coupling_lab.scenarios import double_well, quadratic, quadratic_plus_cosine


class TestConstantProfile:
    def test_closed_form_constants(self, unit_constants):
        c = unit_constants
        assert c.R0 == pytest.approx(0.0, abs=1e-8)
        assert c.R1 == pytest.approx(math.sqrt(8.0), abs=1e-8)
        assert c.Z == pytest.approx(4.0, rel=1e-8)
        assert c.lambda_ == pytest.approx(0.5, rel=1e-8)
        assert c.C == pytest.approx(0.5, rel=1e-8)

    def test_f_is_concave_and_close_to_identity_near_zero(self, unit_constants):
        assert unit_constants.f_of(1.0) == pytest.approx(0.979167, rel=1e-5)
        assert unit_constants.f_of(0.0) == 0.0

    def test_table_columns_line_up(self, unit_constants):
        rows = unit_constants.table_rows()
        assert len(rows[0]) == len(TABLE_COLUMNS)
        assert len(rows) == len(unit_constants.r)

    def test_evaluate_continues_past_cap(self, unit_constants):
        c = unit_constants
        cap = c.r[-1]
        assert c.evaluate("f", cap + 1.0) == pytest.approx(c.f[-1] + c.fprime[-1], rel=1e-10)
        assert c.evaluate("g", cap + 5.0) == pytest.approx(c.g[-1])

    def test_rejects_bad_tolerance(self):
        with pytest.raises(ValueError):
            build_constants(constant_profile(1.0), tol=0.5)

    def test_uniformly_convex_mode_is_identity(self):
        c = build_constants(constant_profile(2.0), mode="uniformly_convex")
        assert c.C == 1.0
        assert c.lambda_ == 2.0
        assert_allclose(c.f_of([0.5, 3.0]), [0.5, 3.0])


class TestPerturbedProfile:
    def test_shifted_profile_constants(self, kappa_bar_constants):
        c = kappa_bar_constants
        assert c.R0 == pytest.approx(2.0, abs=1e-8)
        assert c.R1 == pytest.approx(2.0 + 2.0 * math.sqrt(2.0), abs=1e-6)
        assert c.C == pytest.approx(0.5 * math.exp(-0.5), rel=1e-6)

    @pytest.mark.parametrize("alpha,C1W", [(0.5, 0.25), (1.0, 0.5), (2.0, 1.0), (1.0, 1.0)])
    def test_C_matches_closed_form(self, alpha, C1W):
        c = build_constants(shifted_profile(alpha, C1W))
        assert c.C == pytest.approx(0.5 * math.exp(-2.0 * C1W**2 / alpha), rel=1e-6)

    def test_zero_perturbation_keeps_profile(self):
        base = constant_profile(1.0)
        same = perturbed_profile(base, 0.0, 0.5)
        r = np.array([0.1, 1.0, 10.0])
        assert_allclose(same(r), base(r))

    def test_rejects_bad_C(self):
        with pytest.raises(ValueError):
            perturbed_profile(constant_profile(1.0), 0.5, 1.5)


class TestMembership:
    def test_negative_constant_is_rejected(self):
        with pytest.raises(MembershipError):
            build_constants(constant_profile(-1.0))

    def test_double_well_profile(self):
        profile = profile_of_potential(double_well(), profile_grid(20.0))
        assert profile(2.0) == pytest.approx(0.0, abs=1e-12)
        assert profile(4.0) == pytest.approx(3.0)

    def test_sampled_profile_bounds_closed_form_from_above(self):
        grid = profile_grid(8.0, 40)
        closed = profile_of_potential(quadratic_plus_cosine(), grid)
        sampled = profile_of_potential(quadratic_plus_cosine(), grid, sampled=True)
        r = grid[5:-5]
        assert np.all(sampled(r) >= closed(r) - 1e-9)

    def test_quadratic_profile_is_its_scale(self):
        profile = profile_of_potential(quadratic(scale=2.0), profile_grid(20.0))
        assert profile(3.0) == 2.0


class TestInequalities:
    def test_unit_profile(self, unit_constants):
        assert check_equivalence(unit_constants).passed
        assert check_differential_inequality(unit_constants).passed

    def test_shifted_profile(self, kappa_bar_constants):
        assert check_equivalence(kappa_bar_constants).passed
        assert check_differential_inequality(kappa_bar_constants).passed

    def test_nonconvex_profile_minus_shift(self):
        base = profile_of_potential(quadratic_plus_cosine(), profile_grid(20.0))
        constants = build_constants(perturbed_profile(base, 0.5, 1.0))
        assert check_equivalence(constants).passed
        assert check_differential_inequality(constants).passed

    def test_clipped_double_well(self):
        profile = profile_of_potential(double_well(), profile_grid(20.0)).clipped(4.0)
        constants = build_constants(profile)
        assert check_equivalence(constants).passed
        assert check_differential_inequality(constants).passed


class TestKernel:
    def test_short_and_long_time_branches(self):
        assert q_value(0.5, 0.5, 0.25) == pytest.approx(1.128379, rel=1e-6)
        assert q_value(0.5, 0.5, 1.0) == pytest.approx(0.564190, rel=1e-6)

    def test_integral(self):
        assert q_integral(0.5, 0.5) == pytest.approx(2.256758, rel=1e-6)

    def test_negative_time_rejected(self):
        with pytest.raises(ValueError):
            q_value(0.5, 0.5, -1.0)


class TestWfDistance:
    def test_identical_samples(self, unit_constants):
        x = np.array([0.0, 1.0, 2.5])
        assert wf_distance(x, x, unit_constants) == 0.0

    def test_exact_is_below_monotone(self, unit_constants):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=10), rng.normal(1.0, 2.0, size=10)
        exact = wf_distance(a, b, unit_constants)
        monotone = wf_distance(a, b, unit_constants, mode="monotone")
        assert exact <= monotone + 1e-12

    def test_exact_mode_is_capped(self, unit_constants):
        x = np.zeros(13)
        with pytest.raises(ValueError):
            wf_distance(x, x, unit_constants)

    def test_exact_matches_brute_force_over_permutations(self, kappa_bar_constants):
        rng = np.random.default_rng(17)
        a, b = rng.normal(size=(5, 2)), rng.normal(0.5, 1.5, size=(5, 2))
        cost = kappa_bar_constants.f_of(np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1))
        perms = list(itertools.permutations(range(5)))
        assert len(perms) == 120
        best = min(np.mean(cost[np.arange(5), list(p)]) for p in perms)
        assert wf_distance(a, b, kappa_bar_constants) == pytest.approx(best, rel=1e-12, abs=1e-15)


class TestProfileDomination:
    ORDERED = [
        shifted_profile(1.0, 0.5),
        shifted_profile(1.0, 0.25),
        shifted_profile(2.0, 0.25),
        constant_profile(2.0),
    ]

    def test_profiles_are_ordered(self):
        r = profile_grid(20.0)[1:]
        for low, high in zip(self.ORDERED[:-1], self.ORDERED[1:]):
            assert np.all(low(r) <= high(r))

    def test_constants_grow_with_the_profile(self):
        constants = [build_constants(profile) for profile in self.ORDERED]
        rates = [c.lambda_ for c in constants]
        scales = [c.C for c in constants]
        assert all(x <= y * (1 + 1e-8) for x, y in zip(rates[:-1], rates[1:])), rates
        assert all(x <= y * (1 + 1e-8) for x, y in zip(scales[:-1], scales[1:])), scales
        assert [c.R0 for c in constants] == sorted((c.R0 for c in constants), reverse=True)
