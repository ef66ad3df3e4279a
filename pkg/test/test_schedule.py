import numpy as np
import pytest

from diffpose.errors import InvalidSchedule, OutOfRange
from diffpose.schedule import check_timestep, linear_schedule, posterior_variance, schedule_table, snr


def test_two_step_schedule() -> None:
    s = linear_schedule(2, 0.1, 0.2)
    np.testing.assert_allclose(s.betas, [0.1, 0.2])
    np.testing.assert_allclose(s.alpha_bars, [0.9, 0.72])
    np.testing.assert_array_equal(s.alpha_bars_prev, [1.0, s.alpha_bars[0]])
    np.testing.assert_allclose(posterior_variance(s, 2), 0.2 * 0.1 / 0.28)
    assert posterior_variance(s, 1) == 0.0


def test_single_step_schedule() -> None:
    s = linear_schedule(1, 0.5, 0.5)
    np.testing.assert_array_equal(s.betas, [0.5])
    np.testing.assert_array_equal(s.alpha_bars, [0.5])
    assert snr(s, 1) == pytest.approx(1.0)


def test_default_schedule_tables() -> None:
    s = linear_schedule()
    assert s.T == 1000
    assert s.alpha_bars[-1] < 1e-4
    assert np.all(np.diff(s.alpha_bars) < 0)
    # tables are recomputable exactly from the betas
    np.testing.assert_array_equal(s.alphas, 1.0 - s.betas)
    np.testing.assert_array_equal(s.alpha_bars, np.cumprod(1.0 - s.betas))
    ts = np.arange(1, s.T + 1)
    assert np.all(np.diff(snr(s, ts)) < 0)
    variances = posterior_variance(s, ts)
    assert np.all((variances >= 0.0) & (variances <= s.betas))


def test_snr_values() -> None:
    s = linear_schedule(2, 0.1, 0.2)
    assert snr(s, 1) == pytest.approx(9.0)
    assert snr(s, 2) == pytest.approx(0.72 / 0.28)


@pytest.mark.parametrize(
    "T, start, end",
    [
        (0, 1e-4, 0.02),
        (-3, 1e-4, 0.02),
        (10, 0.0, 0.02),
        (10, 0.03, 0.02),
        (10, 1e-4, 1.0),
        (2.5, 0.1, 0.2),
    ],
)
def test_invalid_schedules(T: int, start: float, end: float) -> None:
    with pytest.raises(InvalidSchedule):
        linear_schedule(T, start, end)


@pytest.mark.parametrize("t", [0, 3, -1])
def test_timestep_out_of_range(t: int) -> None:
    s = linear_schedule(2, 0.1, 0.2)
    with pytest.raises(OutOfRange):
        snr(s, t)
    with pytest.raises(OutOfRange):
        posterior_variance(s, np.array([1, t]))


def test_fractional_timestep_rejected() -> None:
    with pytest.raises(OutOfRange):
        check_timestep(linear_schedule(2, 0.1, 0.2), np.array([1.5]))


def test_schedule_table_rows() -> None:
    rows = list(schedule_table(linear_schedule(2, 0.1, 0.2)))
    assert [r.t for r in rows] == [1, 2]
    assert rows[0].alpha_bar == pytest.approx(0.9)
    assert rows[1].alpha_bar == pytest.approx(0.72)
    assert rows[1].posterior_variance == pytest.approx(0.0714285714)
