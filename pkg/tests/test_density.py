"""Tests for module density"""

import numpy as np
import pytest

from density import (CallablePerturbation, ConjugateGaussian, DensityKind, PowerBarrierProfile, TargetDensity,
                     WeierstrassFourier, assumption_audit, ball_target, density_from_mapping, density_to_mapping,
                     eval_grad_log_r, eval_log_r, hoelder_ball_audit, sample_target, weierstrass_target)
from diagnostics import ks_two_sample
from errors import CapabilityError, EnvelopeError, InvalidInputError, OutsideSupportError


def test_zero_perturbation_is_flat(zero_2d):
    y = np.array([[0.3, -1.2], [2.0, 0.5]])
    np.testing.assert_array_equal(zero_2d.log_r(y), 0.0)
    np.testing.assert_array_equal(zero_2d.grad_log_r(y), 0.0)


def test_conjugate_gaussian_gradient_matches_finite_difference(narrow_gaussian):
    h = 1e-6
    for y in (-1.5, 0.2, 2.4):
        fd = (eval_log_r(narrow_gaussian, [y + h]) - eval_log_r(narrow_gaussian, [y - h])) / (2 * h)
        np.testing.assert_allclose(eval_grad_log_r(narrow_gaussian, [y])[0], fd, rtol=1e-6)


def test_conjugate_gaussian_upper_bound_is_attained():
    family = ConjugateGaussian(mean=0.8, sigma2=0.5, dim=1)
    peak = np.array([[0.8 / (1 - 0.5)]])
    np.testing.assert_allclose(family.value(peak)[0], family.upper_bound())
    assert ConjugateGaussian(mean=0.0, sigma2=2.0, dim=1).upper_bound() is None


def test_weierstrass_bound_and_parameters():
    family = WeierstrassFourier(0.5, 0.5, dim=2, seed=3)
    y = np.random.default_rng(0).uniform(-4, 4, size=(500, 2))
    assert np.all(np.abs(family.value(y)) <= family.sup_abs_bound() + 1e-12)
    with pytest.raises(InvalidInputError):
        WeierstrassFourier(0.5, 2.5, dim=1)


def test_weierstrass_gradient_matches_finite_difference():
    family = WeierstrassFourier(0.5, 1.5, dim=1, terms=6)
    y = np.array([[0.37]])
    h = 1e-7
    fd = (family.value(y + h) - family.value(y - h)) / (2 * h)
    np.testing.assert_allclose(family.gradient(y)[0, 0], fd[0], rtol=1e-5, atol=1e-7)


def test_hoelder_ball_audit():
    density = weierstrass_target(0.5, amplitude=0.3)
    points = np.linspace(-3, 3, 101)[:, None]
    sup, passed = hoelder_ball_audit(density, points)
    assert passed
    assert sup <= density.K


def test_ball_log_r_and_gradient(ball_2d):
    inside = np.array([[0.2, 0.1]])
    outside = np.array([[0.9, 0.9]])
    assert np.isfinite(ball_2d.log_r(inside)[0])
    assert ball_2d.log_r(outside)[0] == -np.inf
    with pytest.raises(OutsideSupportError):
        eval_grad_log_r(ball_2d, outside[0])
    np.testing.assert_array_equal(ball_2d.grad_log_r(outside, strict=False), 0.0)


def test_power_barrier_profile():
    with pytest.raises(InvalidInputError):
        PowerBarrierProfile(0.5)
    s = np.linspace(0.0, 0.99, 50)
    assert assumption_audit(PowerBarrierProfile(2.0), 2.0, s)


def test_point_validation(zero_2d):
    with pytest.raises(InvalidInputError):
        eval_log_r(zero_2d, [1.0, 2.0, 3.0])
    with pytest.raises(InvalidInputError):
        eval_log_r(zero_2d, [np.nan, 0.0])


def test_callable_without_gradient_has_no_capability():
    family = CallablePerturbation(lambda y: np.sin(y[..., 0]), dim=1, upper=1.0)
    density = TargetDensity(DensityKind.GAUSSIAN_PERTURBATION, family, beta=0.0)
    assert density.smoothness_order == 0
    with pytest.raises(CapabilityError):
        eval_grad_log_r(density, [0.1])


def test_exact_gaussian_samples(narrow_gaussian):
    sample = sample_target(narrow_gaussian, 20000, seed=5)
    assert sample.points.shape == (20000, 1)
    np.testing.assert_allclose(sample.points.mean(), 1.0, atol=0.02)
    np.testing.assert_allclose(sample.points.var(), 0.25, atol=0.02)


def test_samples_are_reproducible(mixture_1d):
    a = sample_target(mixture_1d, 3000, seed=11).points
    b = sample_target(mixture_1d, 3000, seed=11).points
    np.testing.assert_array_equal(a, b)
    assert 0.4 < np.mean(a > 0) < 0.6


def test_rejection_sampler_stays_in_ball(ball_2d):
    sample = sample_target(ball_2d, 2000, seed=2)
    assert sample.points.shape == (2000, 2)
    assert np.all(np.linalg.norm(sample.points, axis=1) < 1.0)
    assert 0.0 < sample.acceptance_rate <= 1.0


def test_rejection_sampler_for_rough_target():
    density = weierstrass_target(0.5, amplitude=0.3)
    sample = sample_target(density, 1000, seed=1)
    assert sample.points.shape == (1000, 1)
    assert np.all(np.isfinite(sample.points))


def test_mapping_round_trip():
    block = {'kind': 'ball_supported', 'family': 'zero', 'dim': 2, 'K': 3.0, 'beta': 1.0}
    density = density_from_mapping(block)
    assert density.is_ball
    assert density.K == 3.0
    assert density_to_mapping(density)['family'] == 'zero'
    assert density_to_mapping(ball_target(K=2.0, dim=2))['profile'] == 'power_barrier'


def test_rejection_sampler_matches_exact_draws(mixture_1d):
    exact = sample_target(mixture_1d, 2000, seed=3, method='exact')
    rejected = sample_target(mixture_1d, 2000, seed=4, method='rejection')
    assert exact.acceptance_rate == 1.0
    assert 0.0 < rejected.acceptance_rate < 1.0
    assert np.isfinite(rejected.log_envelope)
    assert ks_two_sample(exact.points[:, 0], rejected.points[:, 0]).passed


def test_sampling_method_validation(ball_2d, mixture_1d):
    with pytest.raises(CapabilityError):
        sample_target(ball_2d, 10, seed=0, method='exact')
    with pytest.raises(InvalidInputError):
        sample_target(mixture_1d, 10, seed=0, method='metropolis')


def test_rejection_sampler_gives_up_on_a_loose_envelope():
    family = CallablePerturbation(lambda y: np.zeros(y.shape[:-1]), dim=1, upper=20.0)
    density = TargetDensity(DensityKind.GAUSSIAN_PERTURBATION, family, beta=0.0)
    with pytest.raises(EnvelopeError):
        sample_target(density, 100, seed=0)


def test_rejection_sampler_raises_an_exceeded_envelope():
    family = CallablePerturbation(lambda y: 0.3 * np.cos(y[..., 0]), dim=1, upper=-1.0)
    density = TargetDensity(DensityKind.GAUSSIAN_PERTURBATION, family, beta=0.0)
    sample = sample_target(density, 500, seed=6)
    assert sample.points.shape == (500, 1)
    assert 0.3 < sample.log_envelope <= 0.8 + 1e-12
    assert 0.0 < sample.acceptance_rate < 1.0
