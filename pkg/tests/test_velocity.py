"""Tests for module velocity"""

import numpy as np
import pandas as pd
import pytest

from density import CallablePerturbation, DensityKind, TargetDensity, weierstrass_target, zero_target
from errors import CapabilityError, DomainError
from moments import QuadratureSpec
from regularity import MIN_FIT_POINTS, fit_scaling_exponent
from velocity import (VelocityMode, default_mode, gradient_scaling_sweep, log_marginal, positive_part_rows, score,
                      score_eigmax_sweep, score_jacobian_eigmax, sweep_points, velocity, velocity_field,
                      velocity_jacobian)

M, SIGMA2 = 1.0, 0.25


def _linear_velocity(t, x):
    """V(t, x) for the N(M, SIGMA2) target, whose flow is affine in x"""
    slope = t * (SIGMA2 - 1.0) / (1.0 + t * t * (SIGMA2 - 1.0))
    return M + slope * (x - t * M), slope


def test_zero_target_has_no_velocity(zero_2d, gh2):
    x = np.array([0.4, -1.3])
    for mode in VelocityMode:
        np.testing.assert_allclose(velocity(zero_2d, 0.7, x, gh2, mode=mode).v, 0.0, atol=1e-12)
    np.testing.assert_allclose(velocity_jacobian(zero_2d, 0.7, x, gh2), 0.0, atol=1e-12)
    np.testing.assert_allclose(score(zero_2d, 0.5, x, gh2), -x, atol=1e-12)


@pytest.mark.parametrize('mode', list(VelocityMode))
def test_gaussian_velocity_is_affine(narrow_gaussian, gh1, mode):
    for t, x in [(0.0, 0.3), (0.5, 1.0), (0.9, -1.5), (0.9999, 2.0)]:
        expected, _ = _linear_velocity(t, x)
        np.testing.assert_allclose(velocity(narrow_gaussian, t, [x], gh1, mode=mode).v[0], expected, rtol=1e-8)


def test_gaussian_velocity_jacobian(narrow_gaussian, gh1):
    for t in (0.3, 0.8, 0.99):
        _, slope = _linear_velocity(t, 0.0)
        np.testing.assert_allclose(velocity_jacobian(narrow_gaussian, t, [0.5], gh1)[0, 0], slope, rtol=1e-7)
    np.testing.assert_array_equal(velocity_jacobian(narrow_gaussian, 0.0, [0.5], gh1), 0.0)


def test_batch_field_matches_pointwise(mixture_1d, gh1):
    t = np.array([0.2, 0.5, 0.95])
    x = np.array([[0.1], [-0.8], [1.7]])
    field = velocity_field(mixture_1d, t, x, gh1, with_jacobian=True)
    for b in range(3):
        single = velocity(mixture_1d, t[b], x[b], gh1, with_jacobian=True)
        np.testing.assert_allclose(field.v[b], single.v, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(field.jac[b], single.jac, rtol=1e-12, atol=1e-14)


def test_estimators_agree_on_mixture(mixture_1d, gh1):
    t = np.linspace(0.05, 0.99, 7)
    x = np.linspace(-2.0, 2.0, 7)[:, None]
    moment = velocity_field(mixture_1d, t, x, gh1, mode=VelocityMode.MOMENT).v
    ibp = velocity_field(mixture_1d, t, x, gh1, mode=VelocityMode.IBP).v
    np.testing.assert_allclose(moment, ibp, rtol=1e-6, atol=1e-8)


def test_gaussian_score(narrow_gaussian, gh1):
    x = 0.3
    np.testing.assert_allclose(score(narrow_gaussian, 0.0, x, gh1), [-(x - M) / SIGMA2], rtol=1e-12)
    tau = 0.7
    u = np.exp(-tau)
    variance = u * u * SIGMA2 + 1.0 - u * u
    np.testing.assert_allclose(score(narrow_gaussian, tau, x, gh1), [-(x - u * M) / variance], rtol=1e-8)
    np.testing.assert_allclose(score_jacobian_eigmax(narrow_gaussian, tau, [x], gh1), 1.0 - 1.0 / variance,
                               rtol=1e-7)


def test_score_domain(narrow_gaussian, gh1):
    with pytest.raises(DomainError):
        score(narrow_gaussian, -0.1, 0.0, gh1)
    with pytest.raises(DomainError):
        score_jacobian_eigmax(narrow_gaussian, 0.0, [0.0], gh1)


def test_score_at_zero_needs_a_gradient(gh1):
    density = TargetDensity(DensityKind.GAUSSIAN_PERTURBATION,
                            CallablePerturbation(lambda y: 0.1 * np.cos(y[..., 0]), dim=1, upper=0.1), beta=0.0)
    with pytest.raises(DomainError):
        score(density, 0.0, 0.0, gh1)
    with pytest.raises(CapabilityError):
        velocity(density, 0.5, [0.0], gh1, mode=VelocityMode.IBP)
    assert default_mode(density) == VelocityMode.MOMENT


def test_log_marginal_of_standard_gaussian(zero_1d, gh1):
    np.testing.assert_allclose(log_marginal(zero_1d, 0.4, [1.5], gh1), -1.125, atol=1e-12)


def test_default_mode(zero_1d, ball_2d):
    assert default_mode(zero_1d) == VelocityMode.IBP
    assert default_mode(ball_2d) == VelocityMode.MOMENT


def test_importance_sampling_velocity_in_high_dimension():
    density = zero_target(dim=5)
    quad = QuadratureSpec.importance(dim=5, samples=2000, seed=3)
    np.testing.assert_allclose(velocity(density, 0.5, np.ones(5), quad).v, 0.0, atol=1e-12)


def test_sweep_points(zero_2d, ball_2d):
    box = sweep_points(zero_2d)
    assert box.shape == (256, 2)
    assert np.all(np.abs(box) <= 3.0)
    ball = sweep_points(ball_2d, n=64)
    assert len(ball) == 64
    assert np.all(np.linalg.norm(ball, axis=1) < 1.0)


def test_gradient_scaling_sweep_on_gaussian(narrow_gaussian, gh1):
    gaps = [1e-4, 1e-3, 1e-2]
    frame = gradient_scaling_sweep(narrow_gaussian, gaps, gh1, points=np.linspace(-2, 2, 9)[:, None])
    assert list(frame.columns) == ['one_minus_t2', 't', 'sup_norm', 'sup_lambda_max']
    for _, row in frame.iterrows():
        _, slope = _linear_velocity(row['t'], 0.0)
        np.testing.assert_allclose(row['sup_norm'], abs(slope), rtol=1e-6)
        np.testing.assert_allclose(row['sup_lambda_max'], slope, rtol=1e-6)
    with pytest.raises(DomainError):
        gradient_scaling_sweep(narrow_gaussian, [0.0], gh1)


def test_score_eigmax_sweep_and_positive_part(narrow_gaussian, wide_gaussian, gh1):
    points = np.linspace(-1, 1, 5)[:, None]
    narrow = score_eigmax_sweep(narrow_gaussian, [0.1, 1.0], gh1, points)
    wide = score_eigmax_sweep(wide_gaussian, [0.1, 1.0], gh1, points)
    assert list(narrow.columns) == ['tau', 'sup_eigmax']
    assert positive_part_rows(narrow, 'sup_eigmax').empty
    assert len(positive_part_rows(wide, 'sup_eigmax')) == 2
    assert isinstance(positive_part_rows(wide, 'sup_eigmax'), pd.DataFrame)


@pytest.mark.parametrize('mode', list(VelocityMode))
def test_score_is_the_gradient_of_the_log_marginal(mixture_1d, gh1, mode):
    h = 1e-5
    for tau in (0.1, 0.5, 1.0):
        u = np.exp(-tau)
        for x in (-1.5, 0.3, 2.0):
            fd = (log_marginal(mixture_1d, u, [x + h], gh1) - log_marginal(mixture_1d, u, [x - h], gh1)) / (2.0 * h)
            np.testing.assert_allclose(score(mixture_1d, tau, x, gh1, mode=mode), [fd], atol=1e-6)


@pytest.mark.slow
@pytest.mark.parametrize('beta', [0.3, 0.5, 0.8])
def test_gradient_norm_scaling_for_rough_targets(beta):
    density = weierstrass_target(beta, amplitude=0.3)
    quad = QuadratureSpec.gauss_hermite(dim=1, order=128)
    gaps = np.logspace(-5, -2, 7)
    frame = gradient_scaling_sweep(density, gaps, quad, points=np.linspace(-2.0, 2.0, 81)[:, None])
    fit = fit_scaling_exponent(zip(frame['one_minus_t2'], frame['sup_norm']))
    assert beta / 2.0 - 1.0 - 0.2 <= fit.slope <= beta / 2.0 - 1.0 + 0.3


@pytest.mark.slow
@pytest.mark.parametrize('beta', [0.3, 0.5, 0.8])
def test_score_eigmax_scaling_for_rough_targets(beta):
    density = weierstrass_target(beta, amplitude=0.3)
    quad = QuadratureSpec.gauss_hermite(dim=1, order=128)
    frame = score_eigmax_sweep(density, np.logspace(-4, -1, 7), quad, points=np.linspace(-2.0, 2.0, 81)[:, None])
    rows = positive_part_rows(frame, 'sup_eigmax')
    assert len(rows) >= MIN_FIT_POINTS
    fit = fit_scaling_exponent(zip(rows['tau'], rows['sup_eigmax']))
    assert fit.slope >= beta / 2.0 - 1.0 - 0.2
