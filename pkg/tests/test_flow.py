"""Tests for module flow"""

import numpy as np
import pytest
from scipy import integrate, stats

from density import bimodal_mixture
from errors import DivergenceError, DomainError, InvalidInputError, OutsideSupportError
from flow import (FlowConfig, TimeParametrization, anisotropic_transport, gaussian_draws, integrate_flow,
                  inverse_map, inverse_points, langevin_flow, map_points, pushforward_samples, tail_bound)
from integrator import StepStatus
from velocity import VelocityMode, log_marginal


def test_zero_target_is_identity(zero_2d):
    x0 = np.array([[0.5, -1.0], [2.0, 0.3]])
    result = map_points(zero_2d, x0, FlowConfig(with_jacobian=True))
    np.testing.assert_array_equal(result.x_final, x0)
    np.testing.assert_allclose(result.jacobian, np.broadcast_to(np.eye(2), (2, 2, 2)), atol=1e-12)
    np.testing.assert_array_equal(result.status, StepStatus.DONE)


def test_gaussian_map_is_affine(narrow_gaussian, flow_cfg):
    for x0 in (-2.0, 0.0, 0.7, 3.0):
        result = integrate_flow(narrow_gaussian, [x0], flow_cfg)
        assert abs(result.x_final[0] - (1.0 + 0.5 * x0)) <= 1e-6 + result.tail_bound
        assert result.steps_accepted > 0


def test_wide_gaussian_map(wide_gaussian, flow_cfg):
    result = map_points(wide_gaussian, np.array([[-1.5], [0.4], [2.0]]), flow_cfg)
    np.testing.assert_allclose(result.x_final[:, 0], np.sqrt(2.0) * np.array([-1.5, 0.4, 2.0]), atol=1e-5)


def test_gaussian_jacobian_and_growth_bound(narrow_gaussian):
    result = integrate_flow(narrow_gaussian, [0.3], FlowConfig(with_jacobian=True))
    np.testing.assert_allclose(result.jacobian, [[0.5]], atol=1e-6)
    # lambda_max is negative throughout, so the bound sits below zero
    assert result.log_growth_bound < 0.0
    assert np.linalg.norm(result.jacobian, 2) <= np.exp(result.log_growth_bound) * 1.05


def test_estimators_give_the_same_map(mixture_1d):
    x0 = np.array([[-1.0], [0.2], [1.4]])
    moment = map_points(mixture_1d, x0, FlowConfig(mode=VelocityMode.MOMENT))
    ibp = map_points(mixture_1d, x0, FlowConfig(mode=VelocityMode.IBP))
    np.testing.assert_allclose(moment.x_final, ibp.x_final, atol=1e-5)


def test_log_switch_matches_direct(narrow_gaussian):
    direct = integrate_flow(narrow_gaussian, [1.2], FlowConfig())
    switched = integrate_flow(narrow_gaussian, [1.2], FlowConfig(time_parametrization='log_switch'))
    np.testing.assert_allclose(switched.x_final, direct.x_final, atol=1e-6)
    assert switched.times[0] == 0.0
    assert np.all(np.diff(switched.times) > 0.0)


def test_recorded_trajectory(mixture_1d, flow_cfg):
    result = integrate_flow(mixture_1d, [0.5], flow_cfg)
    assert result.times[0] == 0.0
    assert result.times[-1] == flow_cfg.t_end
    assert len(result.states) == len(result.times)
    np.testing.assert_array_equal(result.states[0], [0.5])
    np.testing.assert_array_equal(result.states[-1], result.x_final)


def test_inverse_map_of_gaussian(narrow_gaussian):
    y = np.array([[0.0], [1.0], [2.5]])
    np.testing.assert_allclose(inverse_points(narrow_gaussian, y)[:, 0], (y[:, 0] - 1.0) / 0.5, atol=1e-6)
    np.testing.assert_allclose(inverse_map(narrow_gaussian, [1.5]), [1.0], atol=1e-6)


def test_inverse_map_outside_ball(ball_2d):
    with pytest.raises(OutsideSupportError):
        inverse_points(ball_2d, np.array([[0.8, 0.8]]))


def test_flow_config_validation():
    with pytest.raises(InvalidInputError):
        FlowConfig(t_end=1.0)
    with pytest.raises(InvalidInputError):
        FlowConfig(max_step_fraction=0.8)
    with pytest.raises(InvalidInputError):
        FlowConfig(rel_tol=0.0)
    with pytest.raises(InvalidInputError):
        FlowConfig(batch_size=0)
    with pytest.raises(ValueError):
        FlowConfig(time_parametrization='sideways')
    assert FlowConfig(time_parametrization='log_switch').time_parametrization == TimeParametrization.LOG_SWITCH


def test_anchor_validation(zero_2d):
    with pytest.raises(InvalidInputError):
        map_points(zero_2d, np.array([[1.0, 2.0, 3.0]]))
    with pytest.raises(InvalidInputError):
        map_points(zero_2d, np.array([[np.nan, 0.0]]))


def test_langevin_flow(narrow_gaussian):
    with pytest.raises(DomainError):
        langevin_flow(narrow_gaussian, [0.0], 0.5)
    result = langevin_flow(narrow_gaussian, [0.6], 20.0)
    np.testing.assert_allclose(result.x_final, [1.3], atol=1e-5)
    assert result.times[0] == 0.0


def test_langevin_flow_short_horizon_lags_behind(narrow_gaussian):
    short = langevin_flow(narrow_gaussian, [0.6], 1.0)
    long = langevin_flow(narrow_gaussian, [0.6], 20.0)
    assert abs(short.x_final[0] - long.x_final[0]) > 1e-3


def test_pushforward_of_zero_target_keeps_draws(zero_2d):
    cloud = pushforward_samples(zero_2d, 50, 0.5, seed=7)
    np.testing.assert_array_equal(cloud.points, gaussian_draws(50, 2, 7))
    assert cloud.failed_indices.size == 0
    assert cloud.t_stop == 0.5


def test_pushforward_stops_at_t_end(zero_1d, flow_cfg):
    assert pushforward_samples(zero_1d, 10, 1.0, seed=1, cfg=flow_cfg).t_stop == flow_cfg.t_end
    with pytest.raises(DomainError):
        pushforward_samples(zero_1d, 10, 0.0, seed=1)
    with pytest.raises(InvalidInputError):
        pushforward_samples(zero_1d, 0, 0.5, seed=1)


def test_gaussian_draws_do_not_depend_on_count():
    long = gaussian_draws(3000, 2, seed=4)
    short = gaussian_draws(1500, 2, seed=4)
    np.testing.assert_array_equal(long[:1024], short[:1024])


def test_threads_do_not_change_results(mixture_1d):
    x0 = np.linspace(-2.0, 2.0, 11)[:, None]
    cfg = FlowConfig(batch_size=4)
    serial = map_points(mixture_1d, x0, cfg, threads=1)
    pooled = map_points(mixture_1d, x0, cfg, threads=3)
    np.testing.assert_array_equal(serial.x_final, pooled.x_final)
    np.testing.assert_array_equal(serial.steps, pooled.steps)


def test_anisotropic_transport_between_gaussians(zero_2d):
    x = np.array([[1.0, 2.0], [-0.5, 0.0]])
    mapped = anisotropic_transport(zero_2d, zero_2d, x, source_scale=[2.0, 0.5], target_scale=[1.0, 3.0],
                                   source_mean=[1.0, 0.0], target_mean=[0.0, -1.0])
    expected = np.array([0.0, -1.0]) + np.array([1.0, 3.0]) * (x - np.array([1.0, 0.0])) / np.array([2.0, 0.5])
    np.testing.assert_allclose(mapped, expected, atol=1e-12)
    with pytest.raises(InvalidInputError):
        anisotropic_transport(zero_2d, zero_2d, x, source_scale=0.0, target_scale=1.0)


def test_leaving_the_bounding_box(zero_1d):
    with pytest.raises(DivergenceError):
        integrate_flow(zero_1d, [3.0], FlowConfig(bounding_radius=0.5))
    result = map_points(zero_1d, np.array([[3.0], [0.1]]), FlowConfig(bounding_radius=0.5))
    np.testing.assert_array_equal(result.failed_indices, [0])
    assert np.isnan(result.tail_bound[0])


def test_tail_bound_formula():
    t = 0.99
    assert tail_bound(2.0, t) == pytest.approx(2.0 * np.sqrt(1.0 - t * t) * np.arccos(t))
    assert tail_bound(1.0, 1.0 - 1e-8) < 1e-7


def test_change_of_variables_in_one_dimension(narrow_gaussian, gh1):
    cfg = FlowConfig(with_jacobian=True)
    mapped = map_points(narrow_gaussian, np.array([[-1.0], [0.5], [2.0]]), cfg, gh1)

    def flow_density(z):
        return float(np.exp(log_marginal(narrow_gaussian, cfg.t_end, [z], gh1)))

    total, _ = integrate.quad(flow_density, -6.0, 8.0, epsabs=1e-12, limit=200)
    for x0, xf, jac in zip(mapped.x0[:, 0], mapped.x_final[:, 0], mapped.jacobian[:, 0, 0]):
        expected = stats.norm.pdf(x0) / jac
        assert flow_density(xf) / total == pytest.approx(expected, rel=1e-3)


@pytest.mark.slow
def test_langevin_map_approaches_the_transport_map(mixture_1d):
    anchors = np.linspace(-2.0, 2.0, 5)
    transport = map_points(mixture_1d, anchors[:, None]).x_final[:, 0]
    gaps = []
    for horizon in (4.0, 7.0, 10.0):
        langevin = np.array([langevin_flow(mixture_1d, [x], horizon).x_final[0] for x in anchors])
        gaps.append(float(np.max(np.abs(langevin - transport))))
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] <= 1e-3


def test_jacobian_determinant_stays_positive_along_the_flow(gh2):
    density = bimodal_mixture(dim=2)
    axis = np.array([-2.0, 0.0, 2.0])
    anchors = np.stack(np.meshgrid(axis, axis[:2], indexing='ij'), -1).reshape(-1, 2)
    for t_end in (0.3, 0.9, 0.99, FlowConfig().t_end):
        result = map_points(density, anchors, FlowConfig(t_end=t_end, with_jacobian=True), gh2)
        result.raise_for_failures()
        assert np.all(np.linalg.det(result.jacobian) > 0.0)
