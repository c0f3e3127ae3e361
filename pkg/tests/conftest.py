import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from density import ball_target, bimodal_mixture, gaussian_target, zero_target  # noqa: E402
from flow import FlowConfig  # noqa: E402
from moments import QuadratureSpec  # noqa: E402


@pytest.fixture
def zero_1d():
    return zero_target(dim=1)


@pytest.fixture
def zero_2d():
    return zero_target(dim=2)


@pytest.fixture
def narrow_gaussian():
    # N(1, 0.25): T(x) = 1 + 0.5 x
    return gaussian_target(1.0, 0.25, dim=1)


@pytest.fixture
def wide_gaussian():
    # N(0, 2): T(x) = sqrt(2) x
    return gaussian_target(0.0, 2.0, dim=1)


@pytest.fixture
def mixture_1d():
    return bimodal_mixture(dim=1)


@pytest.fixture
def ball_2d():
    return ball_target(K=2.0, dim=2)


@pytest.fixture
def gh1():
    return QuadratureSpec.gauss_hermite(dim=1, order=64)


@pytest.fixture
def gh2():
    return QuadratureSpec.gauss_hermite(dim=2, order=16)


@pytest.fixture
def flow_cfg():
    return FlowConfig()
