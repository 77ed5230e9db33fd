import pytest

from coupling_lab.pipeline import GRADIENT_TIMES, gradient_times, record_times


class TestCheckpointTimes:
    @pytest.mark.parametrize("horizon", [4.0, 10.0])
    def test_gradient_times_do_not_scale_with_horizon(self, horizon):
        assert gradient_times(horizon) == list(GRADIENT_TIMES) == [0.0, 1.0, 2.0, 3.0]

    def test_gradient_times_stop_before_horizon(self):
        assert gradient_times(2.5) == [0.0, 1.0, 2.0]
        assert gradient_times(0.5) == [0.0]

    def test_record_times_include_requested_grid_times(self):
        times = record_times(4.0, 0.01, extra=(0.5, 1.0, 2.0, 4.0), slices=5)
        assert times[0] == 0.0
        assert times[-1] == pytest.approx(4.0)
        for t in (0.5, 1.0, 2.0):
            assert any(abs(s - t) < 1e-9 for s in times)
