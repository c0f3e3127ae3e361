"""Tests for module integrator"""

import numpy as np

from integrator import DormandPrince54, StepStatus


def _decay(t, y):
    return -y


def test_exponential_decay():
    solver = DormandPrince54(_decay, rel_tol=1e-10, abs_tol=1e-12)
    result = solver.integrate(0.0, np.array([[1.0], [2.0]]), 1.0)
    np.testing.assert_array_equal(result.status, StepStatus.DONE)
    np.testing.assert_allclose(result.y[:, 0], [np.exp(-1.0), 2.0 * np.exp(-1.0)], rtol=1e-8)
    np.testing.assert_array_equal(result.t, 1.0)
    assert result.failed.size == 0


def test_backward_integration_recovers_start():
    solver = DormandPrince54(_decay, rel_tol=1e-10, abs_tol=1e-12)
    forward = solver.integrate(0.0, np.array([[0.5]]), 2.0)
    backward = solver.integrate(2.0, forward.y, 0.0)
    np.testing.assert_allclose(backward.y, [[0.5]], rtol=1e-7)


def test_rows_choose_their_own_steps():
    # second component is a per-row rate that stays constant
    def rhs(t, y):
        return np.column_stack([-y[:, 1] * y[:, 0], np.zeros(len(y))])

    solver = DormandPrince54(rhs, rel_tol=1e-9, abs_tol=1e-12)
    result = solver.integrate(0.0, np.array([[1.0, 1.0], [1.0, 40.0]]), 1.0)
    np.testing.assert_array_equal(result.status, StepStatus.DONE)
    assert result.steps_accepted[1] > result.steps_accepted[0]
    np.testing.assert_allclose(result.y[:, 0], [np.exp(-1.0), np.exp(-40.0)], rtol=1e-5, atol=1e-14)


def test_batched_rows_match_single_rows():
    def rhs(t, y):
        return np.column_stack([np.cos(t) * y[:, 0], -y[:, 1]])

    solver = DormandPrince54(rhs, rel_tol=1e-9, abs_tol=1e-12)
    y0 = np.array([[1.0, 1.0], [0.5, 3.0], [2.0, -1.0]])
    batch = solver.integrate(0.0, y0, 1.5)
    for b in range(3):
        single = solver.integrate(0.0, y0[b:b + 1], 1.5)
        np.testing.assert_array_equal(batch.y[b], single.y[0])
        assert batch.steps_accepted[b] == single.steps_accepted[0]
    np.testing.assert_allclose(batch.y[:, 0], y0[:, 0] * np.exp(np.sin(1.5)), rtol=1e-7)


def test_leaving_the_box_is_divergence():
    solver = DormandPrince54(lambda t, y: y * y, bounded_slice=slice(0, 1), bounding_radius=50.0)
    result = solver.integrate(0.0, np.array([[1.0], [0.1]]), 2.0)
    assert result.status[0] == StepStatus.DIVERGED
    assert result.status[1] == StepStatus.DONE
    np.testing.assert_array_equal(result.failed, [0])


def test_non_finite_field_is_divergence():
    def rhs(t, y):
        out = -y.copy()
        out[y[:, 0] < 0] = np.nan
        return out

    result = DormandPrince54(rhs).integrate(0.0, np.array([[1.0], [-1.0]]), 1.0)
    assert result.status[0] == StepStatus.DONE
    assert result.status[1] == StepStatus.DIVERGED
    assert 1 in result.traces


def test_step_underflow_is_stiffness():
    def rhs(t, y):
        return np.where(t[:, None] > 0.5, np.nan, 0.0) * np.ones_like(y)

    result = DormandPrince54(rhs).integrate(0.0, np.array([[1.0]]), 1.0)
    assert result.status[0] == StepStatus.STIFF
    assert result.t[0] <= 0.5
    trace = result.traces[0]
    assert 0 < len(trace) <= 8
    assert all(len(entry) == 3 for entry in trace)


def test_step_ceiling_and_recording():
    solver = DormandPrince54(lambda t, y: np.zeros_like(y), ceiling=lambda t: np.full(np.shape(t), 0.1))
    result = solver.integrate(0.0, np.array([[1.0]]), 1.0, record=True)
    times = np.array(result.times[0])
    assert times[0] == 0.0 and times[-1] == 1.0
    assert np.all(np.diff(times) <= 0.1 + 1e-12)
    assert len(result.states[0]) == len(times)
    assert result.steps_accepted[0] >= 10


def test_max_steps():
    solver = DormandPrince54(_decay, max_steps=3, ceiling=lambda t: np.full(np.shape(t), 0.01))
    result = solver.integrate(0.0, np.array([[1.0]]), 1.0)
    assert result.status[0] == StepStatus.MAX_STEPS
    assert result.steps_accepted[0] == 3
