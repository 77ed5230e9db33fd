import math

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from coupling_lab.errors import AssumptionError, SimulationError
from coupling_lab.scenarios import closed_form_oracle
from coupling_lab.sde import (
    SUMMARY_HEADER,
    CoalescenceRule,
    DriftField,
    contraction_report,
    decay_rate,
    marginal_check,
    simulate_langevin,
    simulate_optimal_coupling,
    simulate_optimal_dynamics,
    simulate_paths,
    simulate_reflection_coupling,
)
from coupling_lab.streams import BLOCK_SIZE, set_worker_cap

RECORD = (0.0, 0.5, 1.0, 2.0)


@pytest.fixture
def ou_drift(ou_scenario):
    return DriftField.from_scenario(ou_scenario)


class TestLangevin:
    def test_seeded_runs_repeat(self, ou_scenario):
        a = simulate_langevin(ou_scenario, 1.0, 1.0, seed=3, n_paths=500)
        b = simulate_langevin(ou_scenario, 1.0, 1.0, seed=3, n_paths=500)
        assert_array_equal(a.states, b.states)

    def test_worker_count_does_not_change_paths(self, ou_scenario):
        n = BLOCK_SIZE + 10
        try:
            set_worker_cap(1)
            serial = simulate_langevin(ou_scenario, 0.0, 0.1, seed=9, n_paths=n)
            set_worker_cap(3)
            threaded = simulate_langevin(ou_scenario, 0.0, 0.1, seed=9, n_paths=n)
        finally:
            set_worker_cap(None)
        assert_array_equal(serial.states, threaded.states)

    def test_mean_relaxes(self, ou_scenario):
        ensemble = simulate_langevin(ou_scenario, 1.0, 1.0, seed=5, n_paths=4000)
        mean, se = ensemble.mean_and_se(1.0)
        assert abs(mean[0] - math.exp(-1.0)) <= 4.0 * se[0] + 3e-3

    def test_unrecorded_time(self, ou_scenario):
        ensemble = simulate_langevin(ou_scenario, 0.0, 1.0, n_paths=10)
        with pytest.raises(KeyError):
            ensemble.at(0.5)


class TestSimulatePaths:
    def test_non_finite_state_names_the_path(self):
        x0 = np.zeros((4, 1))
        with pytest.raises(SimulationError, match="path 0"):
            simulate_paths(lambda t, x: np.full_like(x, np.nan), x0, 0.0, 0.1, 0.01, 0, (0.0, 0.1))

    def test_drift_failure_is_wrapped(self):
        def broken(t, x):
            raise ZeroDivisionError("boom")

        with pytest.raises(SimulationError, match="drift evaluation failed"):
            simulate_paths(broken, np.zeros((2, 1)), 0.0, 0.1, 0.01, 0, (0.0,))

    def test_horizon_shorter_than_step(self):
        with pytest.raises(ValueError):
            simulate_paths(lambda t, x: -x, np.zeros((2, 1)), 0.0, 0.005, 0.01, 0, (0.0,))


class TestOptimalDynamics:
    def test_mean_matches_closed_form(self, ou_scenario):
        oracle = closed_form_oracle(ou_scenario, horizon=2.0)
        ensemble = simulate_optimal_dynamics(
            ou_scenario, oracle, 0.0, (0.0, 2.0), dt=0.005, seed=1, n_paths=4000, record_times=(0.0, 2.0)
        )
        mean, se = ensemble.mean_and_se(2.0)
        expected = oracle.controlled_mean(0.0, 2.0, 0.0)[0, 0]
        assert abs(mean[0] - expected) <= 4.0 * se[0] + 5e-3

    def test_control_cap_is_enforced(self, ou_scenario):
        drift = DriftField.from_scenario(ou_scenario, control=lambda t, x: np.full_like(x, 2.0), control_cap=1.0)
        with pytest.raises(AssumptionError, match="exceeds cap"):
            drift.validate()

    def test_control_needs_cap(self, ou_scenario):
        drift = DriftField.from_scenario(ou_scenario, control=lambda t, x: np.zeros_like(x))
        with pytest.raises(AssumptionError):
            drift.validate()


class TestReflectionCoupling:
    def test_contraction_in_f_distance(self, ou_drift, unit_constants):
        ensemble = simulate_reflection_coupling(
            ou_drift, (0.0, 1.0), 2.0, 0.01, seed=11, n_paths=2000, record_times=RECORD
        )
        report = contraction_report(ensemble, unit_constants)
        assert report.f0 == pytest.approx(unit_constants.f_of(1.0))
        assert np.all(report.contraction_excess() <= 0.0)
        assert np.all(report.meeting_excess()[1:] <= 0.0)

    def test_pairs_stay_together_once_met(self, ou_drift):
        ensemble = simulate_reflection_coupling(
            ou_drift, (0.0, 1.0), 2.0, 0.01, seed=2, n_paths=500, record_times=RECORD
        )
        frac = ensemble.fraction_distinct
        assert frac[0] == 1.0
        assert np.all(np.diff(frac) <= 0.0)
        met = np.isfinite(ensemble.coalescence_times)
        assert_array_equal(ensemble.x_final[met], ensemble.xhat_final[met])

    def test_debug_isometry_check_runs(self, ou_drift):
        ensemble = simulate_reflection_coupling(
            ou_drift, (0.0, 0.5), 0.2, 0.01, seed=4, n_paths=50, record_times=(0.0, 0.2), debug=True
        )
        assert ensemble.n_paths == 50

    def test_close_start_is_coalesced(self, ou_drift):
        ensemble = simulate_reflection_coupling(
            ou_drift, (0.0, 0.01), 0.1, 0.01, seed=4, n_paths=20, coalescence_rule=CoalescenceRule()
        )
        assert np.all(ensemble.coalescence_times == 0.0)
        assert np.all(ensemble.distances == 0.0)

    def test_sampler_start_and_raw_dump(self, ou_drift):
        def zeta(rng, n):
            x = rng.standard_normal((n, 1))
            return x, x + 2.0

        ensemble = simulate_reflection_coupling(
            ou_drift, zeta, 0.5, 0.01, seed=8, n_paths=40, record_times=(0.0, 0.5), dump_paths=3
        )
        rows = ensemble.raw_rows()
        assert len(rows) == 3 * 2
        assert rows[0][0] == 0 and rows[0][1] == 0.0
        assert rows[0][3] - rows[0][2] == pytest.approx(2.0)

    def test_repeatable(self, ou_drift):
        kwargs = dict(n_paths=300, record_times=RECORD)
        a = simulate_reflection_coupling(ou_drift, (0.0, 1.0), 2.0, 0.01, 6, **kwargs)
        b = simulate_reflection_coupling(ou_drift, (0.0, 1.0), 2.0, 0.01, 6, **kwargs)
        assert_array_equal(a.distances, b.distances)

    def test_report_rows_match_header(self, ou_drift, unit_constants):
        ensemble = simulate_reflection_coupling(ou_drift, (0.0, 1.0), 1.0, 0.01, 1, n_paths=100, record_times=RECORD[:3])
        rows = contraction_report(ensemble, unit_constants).rows()
        assert len(rows) == 3
        assert all(len(row) == len(SUMMARY_HEADER) for row in rows)

    def test_decay_rate_is_positive(self, ou_drift, unit_constants):
        times = tuple(0.1 * k for k in range(21))
        ensemble = simulate_reflection_coupling(ou_drift, (0.0, 2.0), 2.0, 0.01, 3, n_paths=2000, record_times=times)
        fit = decay_rate(contraction_report(ensemble, unit_constants))
        assert fit.rate > 0.0
        assert fit.n_points >= 3


class TestOptimalCoupling:
    def test_controlled_pairs_contract_under_perturbed_profile(self, ou_scenario, kappa_bar_constants):
        oracle = closed_form_oracle(ou_scenario, horizon=2.0)
        ensemble = simulate_optimal_coupling(
            ou_scenario, oracle, (0.0, 1.0), (0.0, 2.0), dt=0.01, seed=12, n_paths=2000, record_times=RECORD
        )
        report = contraction_report(ensemble, kappa_bar_constants)
        assert np.all(report.contraction_excess() <= 0.0)


class TestPathStreams:
    def test_langevin_path_does_not_depend_on_ensemble_size(self, ou_scenario):
        small = simulate_langevin(ou_scenario, 0.0, 0.2, dt=0.01, seed=9, n_paths=7)
        large = simulate_langevin(ou_scenario, 0.0, 0.2, dt=0.01, seed=9, n_paths=40)
        assert_array_equal(small.states, large.states[:, :7])
        assert large.stream_ids[3].tolist() == [9, 3]

    def test_langevin_path_does_not_depend_on_block_shape(self, ou_scenario):
        a = simulate_langevin(ou_scenario, 0.0, 0.05, dt=0.01, seed=9, n_paths=BLOCK_SIZE + 2)
        b = simulate_langevin(ou_scenario, 0.0, 0.05, dt=0.01, seed=9, n_paths=BLOCK_SIZE + 5)
        assert_array_equal(a.states, b.states[:, : BLOCK_SIZE + 2])

    def test_coupled_path_does_not_depend_on_ensemble_size(self, ou_drift):
        def zeta(rng, n):
            x = rng.standard_normal((n, 1))
            return x, x + 1.5

        small = simulate_reflection_coupling(ou_drift, zeta, 0.5, 0.01, seed=8, n_paths=10, record_times=(0.0, 0.5))
        large = simulate_reflection_coupling(ou_drift, zeta, 0.5, 0.01, seed=8, n_paths=25, record_times=(0.0, 0.5))
        assert_array_equal(small.distances, large.distances[:, :10])
        assert_array_equal(small.xhat_final, large.xhat_final[:10])
        assert_array_equal(small.coalescence_times, large.coalescence_times[:10])


class TestCoalescenceRule:
    def test_sign_flip_follows_dimension(self):
        assert CoalescenceRule().flips_sign(1)
        assert not CoalescenceRule().flips_sign(2)
        assert not CoalescenceRule(sign_flip=False).flips_sign(1)

    def test_sign_flip_is_refused_above_one_dimension(self):
        drift = DriftField(potential_grad=lambda t, x: x, dim=2)
        with pytest.raises(ValueError, match="d = 1"):
            simulate_reflection_coupling(
                drift, ([0.0, 0.0], [1.0, 0.0]), 0.1, 0.01, 0, coalescence_rule=CoalescenceRule(sign_flip=True), n_paths=4
            )

    def test_planar_pairs_meet_only_by_distance(self):
        drift = DriftField(potential_grad=lambda t, x: x, dim=2)
        ensemble = simulate_reflection_coupling(
            drift, ([0.0, 0.0], [1.0, 1.0]), 1.0, 0.01, 5, n_paths=400, record_times=(0.0, 1.0)
        )
        assert ensemble.fraction_distinct[0] == 1.0
        assert np.all(ensemble.distances[-1][np.isinf(ensemble.coalescence_times)] > 0.0)


class TestMarginalCheck:
    def test_uncoupled_marginal_matches_langevin(self, ou_scenario, ou_drift):
        ensemble = simulate_reflection_coupling(
            ou_drift, (0.0, 1.0), 0.5, 5e-4, seed=21, n_paths=10_000, record_times=(0.0, 0.5)
        )
        check = marginal_check(ensemble, ou_scenario, 1.0, 0.5, n_reference=10_000)
        assert check.n_coupled == check.n_reference == 10_000
        assert check.ks <= 0.025

    def test_wrong_start_is_detected(self, ou_scenario, ou_drift):
        ensemble = simulate_reflection_coupling(
            ou_drift, (0.0, 2.0), 0.5, 0.01, seed=3, n_paths=2000, record_times=(0.0, 0.5)
        )
        check = marginal_check(ensemble, ou_scenario, 0.0, 0.5, n_reference=2000)
        assert check.ks > 0.2
        assert check.as_dict()["coordinate"] == 0
