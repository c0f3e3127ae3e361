"""Tests for module moments"""

import numpy as np
import pytest

from density import weierstrass_target
from errors import DegenerateMeasureError, DomainError, InvalidInputError
from moments import (QuadratureSpec, default_quadrature, grad_pairing, hess_pairing, moment_concentration,
                     node_set, tilted_expectation, tilted_moments, tilted_moments_batch)


def _conjugate_tilt(m, sigma2, t, x):
    """Exact mean and variance of the tilted measure of N(m, sigma2) in 1D"""
    precision = -1.0 + 1.0 / sigma2 + 1.0 / (1.0 - t * t)
    mean = (m / sigma2 + t * x / (1.0 - t * t)) / precision
    return mean, 1.0 / precision


def test_zero_target_moments_are_gaussian(zero_1d, gh1):
    moments = tilted_moments(zero_1d, 0.5, [1.0], gh1)
    np.testing.assert_allclose(moments.mean, [0.5], atol=1e-12)
    np.testing.assert_allclose(moments.cov, [[0.75]], atol=1e-12)
    np.testing.assert_allclose(moments.log_Z, 0.0, atol=1e-12)
    assert not moments.accuracy_warning


def test_conjugate_gaussian_moments(narrow_gaussian, gh1):
    for t, x in [(0.5, 1.0), (0.9, -2.0), (0.999, 0.3)]:
        mean, var = _conjugate_tilt(1.0, 0.25, t, x)
        moments = tilted_moments(narrow_gaussian, t, [x], gh1)
        np.testing.assert_allclose(moments.mean[0], mean, rtol=1e-8)
        np.testing.assert_allclose(moments.cov[0, 0], var, rtol=1e-8)


def test_batch_rows_match_single_calls(mixture_1d, gh1):
    t = np.array([0.1, 0.6, 0.95])
    x = np.array([[-1.0], [0.4], [2.0]])
    batch = tilted_moments_batch(mixture_1d, t, x, gh1)
    for b in range(3):
        single = tilted_moments(mixture_1d, t[b], x[b], gh1)
        np.testing.assert_allclose(batch.mean[b], single.mean, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(batch.cov[b], single.cov, rtol=1e-12, atol=1e-14)


def test_domain_and_input_errors(zero_1d, gh1):
    with pytest.raises(DomainError):
        tilted_moments(zero_1d, 1.0, [0.0], gh1)
    with pytest.raises(DomainError):
        tilted_moments(zero_1d, -0.1, [0.0], gh1)
    with pytest.raises(InvalidInputError):
        tilted_moments(zero_1d, 0.5, [np.inf], gh1)


def test_quadrature_spec_ranges():
    with pytest.raises(InvalidInputError):
        QuadratureSpec.importance(samples=100)
    with pytest.raises(InvalidInputError):
        QuadratureSpec.gauss_hermite(order=200)
    with pytest.raises(InvalidInputError):
        QuadratureSpec.gauss_hermite(dim=5)
    assert default_quadrature(2).is_gauss_hermite
    assert not default_quadrature(6).is_gauss_hermite


def test_node_set_is_shared():
    spec = QuadratureSpec.importance(dim=3, samples=2000, seed=4)
    assert node_set(spec) is node_set(spec)
    assert not node_set(spec).z.flags.writeable


def test_importance_sampling_antithetic_mean(zero_2d):
    quad = QuadratureSpec.importance(dim=2, samples=4000, seed=1)
    moments = tilted_moments(zero_2d, 0.3, [1.0, -2.0], quad)
    np.testing.assert_allclose(moments.mean, [0.3, -0.6], atol=1e-12)
    assert moments.ess_or_order == pytest.approx(4000.0)


def test_expectation_and_pairings(zero_1d, gh1):
    t, x = 0.6, [0.7]
    mean = tilted_expectation(zero_1d, t, x, gh1, lambda y: y)
    np.testing.assert_allclose(mean, [0.42], atol=1e-12)
    np.testing.assert_allclose(grad_pairing(zero_1d, t, x, gh1, lambda y: np.ones(len(y))), 0.0, atol=1e-12)
    # d/dx E[y] = t for the standard Gaussian target
    np.testing.assert_allclose(grad_pairing(zero_1d, t, x, gh1, lambda y: y), [[0.6]], atol=1e-10)
    np.testing.assert_allclose(hess_pairing(zero_1d, t, x, gh1, lambda y: y), 0.0, atol=1e-10)
    with pytest.raises(InvalidInputError):
        tilted_expectation(zero_1d, t, x, gh1, lambda y: np.log(y[:, 0] - 100.0))


def test_moment_concentration_of_gaussian(zero_1d, gh1):
    ratios = moment_concentration(zero_1d, 0.8, [1.5], gh1)
    np.testing.assert_allclose(ratios.second, 1.0, rtol=1e-10)
    np.testing.assert_allclose(ratios.fourth, 2.0, rtol=1e-10)


def test_degenerate_ball_anchor(ball_2d):
    quad = QuadratureSpec.gauss_hermite(dim=2, order=48)
    t = np.array([0.999])
    x = np.array([[5.0, 5.0]])
    with pytest.raises(DegenerateMeasureError):
        tilted_moments_batch(ball_2d, t, x, quad)
    batch = tilted_moments_batch(ball_2d, t, x, quad, on_degenerate='nan')
    assert batch.degenerate[0]
    assert np.all(np.isnan(batch.mean[0]))


def test_moment_concentration_of_perturbed_targets(mixture_1d):
    rough = weierstrass_target(0.5, amplitude=0.3)
    quad = QuadratureSpec.gauss_hermite(dim=1, order=96)
    for density in (mixture_1d, rough):
        for t in (0.3, 0.9, 0.99, 1.0 - 1e-6):
            for x in (-2.0, 0.0, 1.5):
                ratios = moment_concentration(density, t, [x], quad)
                assert ratios.second <= np.exp(2.0 * density.K)
                assert ratios.fourth <= 3.0 * np.exp(4.0 * density.K)


def test_importance_sampling_agrees_with_gauss_hermite(mixture_1d, gh1):
    quad = QuadratureSpec.importance(dim=1, samples=200000, seed=8, antithetic=False)
    for t in (0.3, 0.8, 0.99):
        for x in (-1.0, 0.5, 2.0):
            exact = tilted_moments(mixture_1d, t, [x], gh1)
            sampled = tilted_moments(mixture_1d, t, [x], quad)
            assert abs(sampled.mean[0] - exact.mean[0]) <= 5.0 * sampled.mean_stderr[0] + 1e-12


@pytest.mark.parametrize('name', ['narrow_gaussian', 'mixture_1d'])
def test_hess_pairing_matches_finite_differences(name, request, gh1):
    density = request.getfixturevalue(name)
    t, x, h = 0.6, 0.4, 1e-3

    def second_moment(at):
        return float(tilted_expectation(density, t, [at], gh1, lambda y: y[:, 0] ** 2))

    fd = (second_moment(x + h) - 2.0 * second_moment(x) + second_moment(x - h)) / (h * h)
    paired = hess_pairing(density, t, [x], gh1, lambda y: y[:, 0] ** 2)
    assert paired.shape == (1, 1, 1)
    assert paired[0, 0, 0] == pytest.approx(fd, rel=1e-4)
