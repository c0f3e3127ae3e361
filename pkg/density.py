"""
Target densities p = r * gamma_d and their log-ratio r = p / gamma_d.

Two kinds are supported: Gaussian perturbations p(x) = exp(-||x||^2/2 + a(x))
and ball-supported densities p(x) = exp(-u(||x||^2) + a(x)) on the open unit
ball. Densities are stored unnormalised; everything downstream only uses
log r up to an additive constant.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np
from scipy import optimize
from scipy.special import logsumexp

from config import Config
from errors import CapabilityError, EnvelopeError, InvalidInputError, OutsideSupportError
from logger_config import get_logger
from numerics_utils import Stream, low_discrepancy_points, stream_rng, unit_sphere

logger = get_logger('heatflow.density')


class DensityKind(str, Enum):
    GAUSSIAN_PERTURBATION = 'gaussian_perturbation'
    BALL_SUPPORTED = 'ball_supported'


class FamilyVariant(str, Enum):
    ZERO = 'zero'
    CONJUGATE_GAUSSIAN = 'conjugate_gaussian'
    LOG_MIXTURE_RATIO = 'log_mixture'
    WEIERSTRASS_FOURIER = 'weierstrass'
    CALLABLE = 'callable'


# ---------------------------------------------------------------------------
# Perturbation families a(x)
# ---------------------------------------------------------------------------

class PerturbationFamily(ABC):
    """Log-density tilt a: R^d -> R, evaluated row-wise on arrays (..., d)"""

    variant = None
    smoothness_order = 1
    exact_draws = False

    def __init__(self, dim):
        if int(dim) < 1:
            raise InvalidInputError(f"dimension must be positive, got {dim}")
        self.dim = int(dim)

    @abstractmethod
    def value(self, y):
        ...

    def gradient(self, y):
        raise CapabilityError(f"{self.variant.value} perturbation exposes no gradient")

    def upper_bound(self):
        """Analytic sup of a, or None when unknown or infinite"""
        return None

    def sup_abs_bound(self):
        """Analytic sup of |a|, or None"""
        return None

    def parameters(self):
        return {}

    def draw(self, rng, n):
        """Exact draws from the normalised gamma_d e^a (families with exact_draws only)"""
        raise CapabilityError(f"{self.variant.value} perturbation has no exact sampler")


class ZeroPerturbation(PerturbationFamily):
    variant = FamilyVariant.ZERO
    exact_draws = True

    def value(self, y):
        y = np.asarray(y, dtype=float)
        return np.zeros(y.shape[:-1])

    def gradient(self, y):
        return np.zeros_like(np.asarray(y, dtype=float))

    def upper_bound(self):
        return 0.0

    def sup_abs_bound(self):
        return 0.0

    def draw(self, rng, n):
        return rng.standard_normal((n, self.dim))


class ConjugateGaussian(PerturbationFamily):
    """a(x) = ||x||^2/2 - ||x - m||^2 / (2 sigma2), so that p = N(m, sigma2 I)"""

    variant = FamilyVariant.CONJUGATE_GAUSSIAN
    exact_draws = True

    def __init__(self, mean, sigma2, dim):
        super().__init__(dim)
        if not sigma2 > 0:
            raise InvalidInputError(f"sigma2 must be positive, got {sigma2}")
        self.mean = np.broadcast_to(np.asarray(mean, dtype=float), (self.dim,)).copy()
        self.sigma2 = float(sigma2)

    def value(self, y):
        y = np.asarray(y, dtype=float)
        return 0.5 * np.sum(y * y, axis=-1) - np.sum((y - self.mean) ** 2, axis=-1) / (2.0 * self.sigma2)

    def gradient(self, y):
        y = np.asarray(y, dtype=float)
        return y - (y - self.mean) / self.sigma2

    def upper_bound(self):
        m2 = float(self.mean @ self.mean)
        if self.sigma2 < 1.0:
            return m2 / (2.0 * (1.0 - self.sigma2))
        if self.sigma2 == 1.0 and m2 == 0.0:
            return 0.0
        return None

    def parameters(self):
        return {'mean': self.mean.tolist(), 'sigma2': self.sigma2}

    def draw(self, rng, n):
        return self.mean + np.sqrt(self.sigma2) * rng.standard_normal((n, self.dim))


class LogMixtureRatio(PerturbationFamily):
    """Normalised isotropic Gaussian mixture written as a Gaussian perturbation.

    a(x) = log sum_k w_k N(x; m_k, v_k I) - log gamma_d(x)
    """

    variant = FamilyVariant.LOG_MIXTURE_RATIO
    exact_draws = True

    def __init__(self, weights, means, variances, dim):
        super().__init__(dim)
        weights = np.asarray(weights, dtype=float)
        variances = np.asarray(variances, dtype=float)
        means = np.asarray(means, dtype=float).reshape(len(weights), -1)
        if means.shape[1] == 1 and self.dim > 1:
            # scalar means are offsets along the first axis
            means = np.hstack([means, np.zeros((len(weights), self.dim - 1))])
        if means.shape != (len(weights), self.dim) or len(variances) != len(weights):
            raise InvalidInputError("mixture weights, means and variances do not line up")
        if np.any(weights <= 0) or np.any(variances <= 0):
            raise InvalidInputError("mixture weights and variances must be positive")
        self.weights = weights / weights.sum()
        self.means = means
        self.variances = variances
        self._log_coef = np.log(self.weights) - 0.5 * self.dim * np.log(self.variances)

    def _component_logits(self, y):
        diff = y[..., None, :] - self.means
        return self._log_coef - np.sum(diff * diff, axis=-1) / (2.0 * self.variances)

    def value(self, y):
        y = np.asarray(y, dtype=float)
        return logsumexp(self._component_logits(y), axis=-1) + 0.5 * np.sum(y * y, axis=-1)

    def gradient(self, y):
        y = np.asarray(y, dtype=float)
        logits = self._component_logits(y)
        resp = np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))
        pull = (y[..., None, :] - self.means) / self.variances[:, None]
        return y - np.sum(resp[..., None] * pull, axis=-2)

    def upper_bound(self):
        if np.all(self.variances < 1.0):
            m2 = np.sum(self.means ** 2, axis=1)
            return float(logsumexp(self._log_coef + m2 / (2.0 * (1.0 - self.variances))))
        return None

    def parameters(self):
        return {
            'weights': self.weights.tolist(),
            'means': self.means.ravel().tolist(),
            'variances': self.variances.tolist(),
        }

    def draw(self, rng, n):
        labels = rng.choice(len(self.weights), size=n, p=self.weights)
        noise = rng.standard_normal((n, self.dim))
        return self.means[labels] + np.sqrt(self.variances[labels])[:, None] * noise


class WeierstrassFourier(PerturbationFamily):
    """Lacunary Fourier series with Hoelder exponent beta.

    a(x) = eps * sum_{j=1..M} base^(-beta j) cos(base^j <w_j, x> + phi_j)
    with unit directions w_j and phases phi_j drawn from the family seed.
    """

    variant = FamilyVariant.WEIERSTRASS_FOURIER

    def __init__(self, amplitude, beta, dim, base=Config.WEIERSTRASS_BASE,
                 terms=Config.WEIERSTRASS_TERMS, seed=0):
        super().__init__(dim)
        if not 0.0 < beta < 2.0:
            raise InvalidInputError(f"Weierstrass beta must lie in (0, 2), got {beta}")
        if not base > 1.0:
            raise InvalidInputError(f"Weierstrass base must exceed 1, got {base}")
        if int(terms) < 1:
            raise InvalidInputError("Weierstrass series needs at least one term")
        self.amplitude = float(amplitude)
        self.beta = float(beta)
        self.base = float(base)
        self.terms = int(terms)
        self.seed = int(seed)

        rng = stream_rng(self.seed, Stream.WEIERSTRASS, self.dim, self.terms)
        self.directions = unit_sphere(rng, self.terms, self.dim)
        self.phases = rng.uniform(0.0, 2.0 * np.pi, self.terms)
        j = np.arange(1, self.terms + 1)
        self.frequencies = self.base ** j
        self.coefficients = self.amplitude * self.base ** (-self.beta * j)

    def _arguments(self, y):
        return self.frequencies * (np.asarray(y, dtype=float) @ self.directions.T) + self.phases

    def value(self, y):
        return np.cos(self._arguments(y)) @ self.coefficients

    def gradient(self, y):
        slopes = -np.sin(self._arguments(y)) * (self.coefficients * self.frequencies)
        return slopes @ self.directions

    def upper_bound(self):
        return self.sup_abs_bound()

    def sup_abs_bound(self):
        return float(np.abs(self.coefficients).sum())

    def parameters(self):
        return {
            'amplitude': self.amplitude,
            'base': self.base,
            'terms': self.terms,
            'family_seed': self.seed,
        }


class CallablePerturbation(PerturbationFamily):
    """Programmatic extension point: any vectorised a (and optionally grad a)"""

    variant = FamilyVariant.CALLABLE

    def __init__(self, value_fn: Callable, dim, gradient_fn: Optional[Callable] = None,
                 upper: Optional[float] = None, sup_abs: Optional[float] = None):
        super().__init__(dim)
        self._value_fn = value_fn
        self._gradient_fn = gradient_fn
        self._upper = upper
        self._sup_abs = sup_abs
        self.smoothness_order = 1 if gradient_fn is not None else 0

    def value(self, y):
        return np.asarray(self._value_fn(np.asarray(y, dtype=float)), dtype=float)

    def gradient(self, y):
        if self._gradient_fn is None:
            return super().gradient(y)
        return np.asarray(self._gradient_fn(np.asarray(y, dtype=float)), dtype=float)

    def upper_bound(self):
        return self._upper

    def sup_abs_bound(self):
        return self._sup_abs


# ---------------------------------------------------------------------------
# Boundary profiles u for ball-supported targets
# ---------------------------------------------------------------------------

class BoundaryProfile(ABC):
    @abstractmethod
    def value(self, s):
        ...

    @abstractmethod
    def derivative(self, s):
        ...


class PowerBarrierProfile(BoundaryProfile):
    """u(s) = (1 - s)^(-1/K); satisfies the boundary growth assumption for K >= 1"""

    name = 'power_barrier'

    def __init__(self, K):
        if K < 1.0:
            raise InvalidInputError(f"power barrier profile requires K >= 1, got {K}")
        self.K = float(K)

    def value(self, s):
        return (1.0 - np.asarray(s, dtype=float)) ** (-1.0 / self.K)

    def derivative(self, s):
        return (1.0 - np.asarray(s, dtype=float)) ** (-1.0 / self.K - 1.0) / self.K


# ---------------------------------------------------------------------------
# Target density
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class TargetDensity:
    kind: DensityKind
    family: PerturbationFamily
    K: float = 1.0
    beta: float = 1.0
    profile: Optional[BoundaryProfile] = None
    name: str = field(default='')

    def __post_init__(self):
        self.kind = DensityKind(self.kind)
        if not self.K > 0:
            raise InvalidInputError(f"K must be positive, got {self.K}")
        if self.beta < 0:
            raise InvalidInputError(f"beta must be non-negative, got {self.beta}")
        if self.kind == DensityKind.BALL_SUPPORTED and self.profile is None:
            self.profile = PowerBarrierProfile(self.K)

    @property
    def dim(self):
        return self.family.dim

    @property
    def smoothness_order(self):
        return self.family.smoothness_order

    @property
    def is_ball(self):
        return self.kind == DensityKind.BALL_SUPPORTED

    def log_r(self, y):
        """log r on rows of y (..., d); -inf outside the ball for ball targets"""
        y = np.asarray(y, dtype=float)
        if not self.is_ball:
            return self.family.value(y)
        s = np.sum(y * y, axis=-1)
        inside = s < 1.0
        out = np.full(s.shape, -np.inf)
        if np.any(inside):
            s_in = s[inside]
            out[inside] = -self.profile.value(s_in) + 0.5 * s_in + self.family.value(y[inside])
        return out

    def grad_log_r(self, y, strict=True):
        """grad log r on rows of y; outside-ball rows raise (strict) or give zeros"""
        if self.smoothness_order < 1:
            raise CapabilityError("density has smoothness order 0: no gradient available")
        y = np.asarray(y, dtype=float)
        if not self.is_ball:
            return self.family.gradient(y)
        s = np.sum(y * y, axis=-1)
        inside = s < 1.0
        if strict and not np.all(inside):
            raise OutsideSupportError("gradient of log r requested outside the unit ball")
        out = np.zeros_like(y)
        if np.any(inside):
            y_in = y[inside]
            u_prime = self.profile.derivative(s[inside])
            out[inside] = -2.0 * y_in * u_prime[..., None] + y_in + self.family.gradient(y_in)
        return out

    def log_r_upper_bound(self):
        bound = self.family.upper_bound()
        if bound is None:
            return None
        if self.is_ball:
            # -u(s) + s/2 <= -1 + 1/2 since u >= 1 on [0, 1)
            return bound - 0.5
        return bound

    def describe(self):
        return self.name or f"{self.kind.value}/{self.family.variant.value}/d={self.dim}"


def _as_point(density, y):
    y = np.asarray(y, dtype=float)
    if y.ndim == 0:
        y = y.reshape(1)
    if y.shape != (density.dim,):
        raise InvalidInputError(f"expected a point of shape ({density.dim},), got {y.shape}")
    if not np.all(np.isfinite(y)):
        raise InvalidInputError(f"non-finite point {y}")
    return y


def eval_log_r(density, y):
    """log r(y) up to the density's additive constant; -inf outside a ball support"""
    return float(density.log_r(_as_point(density, y)))


def eval_grad_log_r(density, y):
    """grad log r(y) (= grad a for Gaussian perturbations)"""
    if density.smoothness_order < 1:
        raise CapabilityError("density has smoothness order 0: no gradient available")
    return density.grad_log_r(_as_point(density, y), strict=True)


# ---------------------------------------------------------------------------
# Ground-truth sampler
# ---------------------------------------------------------------------------

@dataclass
class TargetSample:
    points: np.ndarray
    acceptance_rate: float
    log_envelope: float
    proposals: int


ENVELOPE_MARGIN = 0.5
MIN_ACCEPTANCE = 1e-4
SAMPLING_METHODS = ('auto', 'exact', 'rejection')


def estimate_log_envelope(density, seed=0):
    """Upper bound M on log r: analytic when the family provides one, else a
    coarse search followed by local polishing plus a safety margin."""
    analytic = density.log_r_upper_bound()
    if analytic is not None:
        return float(analytic)

    d = density.dim
    radius = 1.0 if density.is_ball else 4.0
    candidates = [low_discrepancy_points(1024, d, -radius, radius, seed=seed)]
    if d == 1:
        candidates.append(np.linspace(-radius, radius, 2001)[:, None])
    if not density.is_ball:
        candidates.append(stream_rng(seed, Stream.ENVELOPE).standard_normal((4096, d)) * 2.0)
    points = np.vstack(candidates)
    values = density.log_r(points)
    best = points[np.argsort(values)[::-1][:5]]
    top = float(np.max(values))

    def objective(y):
        value = density.log_r(y)
        return -value if np.isfinite(value) else 1e300

    for start in best:
        result = optimize.minimize(objective, start, method='Nelder-Mead',
                                   options={'xatol': 1e-8, 'fatol': 1e-10, 'maxiter': 2000})
        if np.isfinite(result.fun) and -result.fun > top:
            top = float(-result.fun)
    return top + ENVELOPE_MARGIN


def sample_target(density, n, seed, chunk_size=4096, warmup=20000, max_restarts=5, method='auto'):
    """n i.i.d. samples from the normalised target.

    method='auto' uses exact draws when the family has them and rejection from
    gamma_d otherwise; 'exact' and 'rejection' force one path. Either way chunks
    are keyed by (seed, chunk index), so the output does not depend on how
    chunks are scheduled.
    """
    if n < 1:
        raise InvalidInputError("sample count must be positive")
    if method not in SAMPLING_METHODS:
        raise InvalidInputError(f"sampling method must be one of {SAMPLING_METHODS}, got {method!r}")
    d = density.dim
    exact = not density.is_ball and density.family.exact_draws
    if method == 'exact' and not exact:
        raise CapabilityError(f"{density.describe()} has no exact sampler")
    if exact and method != 'rejection':
        chunks = [density.family.draw(stream_rng(seed, Stream.TARGET, c), min(chunk_size, n - start))
                  for c, start in enumerate(range(0, n, chunk_size))]
        return TargetSample(points=np.vstack(chunks), acceptance_rate=1.0, log_envelope=float("nan"), proposals=n)
    log_m = estimate_log_envelope(density, seed)

    for restart in range(max_restarts + 1):
        accepted = []
        count = 0
        proposals = 0
        chunk = 0
        bumped = False
        while count < n:
            rng = stream_rng(seed, Stream.TARGET, chunk)
            z = rng.standard_normal((chunk_size, d))
            u = rng.random(chunk_size)
            lr = density.log_r(z)
            if np.any(lr > log_m):
                new_m = float(np.max(lr)) + ENVELOPE_MARGIN
                logger.warning(f"Envelope exceeded ({np.max(lr):.4f} > {log_m:.4f}); "
                               f"raising to {new_m:.4f} and restarting")
                log_m = new_m
                bumped = True
                break
            keep = np.log(u) < lr - log_m
            accepted.append(z[keep])
            count += int(keep.sum())
            proposals += chunk_size
            chunk += 1
            rate = count / proposals
            if proposals >= warmup and rate < MIN_ACCEPTANCE:
                raise EnvelopeError(
                    f"acceptance rate {rate:.2e} below {MIN_ACCEPTANCE:g} after {proposals} proposals "
                    f"(log envelope {log_m:.3f})"
                )
        if not bumped:
            points = np.vstack(accepted)[:n]
            rate = count / proposals
            logger.debug(f"Rejection sampler: {n} samples, acceptance {rate:.4f}, envelope {log_m:.4f}")
            return TargetSample(points=points, acceptance_rate=rate, log_envelope=log_m, proposals=proposals)

    raise EnvelopeError(f"envelope kept growing after {max_restarts} restarts: log r looks unbounded")


# ---------------------------------------------------------------------------
# Audits
# ---------------------------------------------------------------------------

def hoelder_ball_audit(density, points):
    """sup |a| over points and whether it stays within the K-ball"""
    values = np.abs(density.family.value(np.asarray(points, dtype=float)))
    sup = float(np.max(values))
    return sup, sup <= density.K


def assumption_audit(profile, K, s_values):
    """u(s) >= (1-s)^(-1/K) and 0 <= u'(s) <= (1-s)^(-(K+1)) at every s"""
    s = np.asarray(s_values, dtype=float)
    u = profile.value(s)
    du = profile.derivative(s)
    lower = (1.0 - s) ** (-1.0 / K)
    upper = (1.0 - s) ** (-(K + 1.0))
    tol = 1e-12 * np.maximum(1.0, upper)
    return bool(np.all(u >= lower - tol) and np.all(du >= 0.0) and np.all(du <= upper + tol))


# ---------------------------------------------------------------------------
# Shipped targets and the [density] block
# ---------------------------------------------------------------------------

def gaussian_target(mean, sigma2, dim=1):
    family = ConjugateGaussian(mean, sigma2, dim)
    return TargetDensity(DensityKind.GAUSSIAN_PERTURBATION, family, K=1.0, beta=2.0,
                         name=f"gaussian(m={family.mean.tolist()}, sigma2={sigma2})")


def zero_target(dim=1):
    return TargetDensity(DensityKind.GAUSSIAN_PERTURBATION, ZeroPerturbation(dim), K=1.0, beta=2.0,
                         name='standard_gaussian')


def bimodal_mixture(dim=1, separation=1.2, variance=0.36):
    family = LogMixtureRatio([0.5, 0.5], [separation, -separation], [variance, variance], dim)
    return TargetDensity(DensityKind.GAUSSIAN_PERTURBATION, family, K=2.0, beta=2.0,
                         name=f"bimodal_mixture(+-{separation}, v={variance})")


def weierstrass_target(beta, amplitude=0.5, dim=1, seed=0, terms=Config.WEIERSTRASS_TERMS,
                       base=Config.WEIERSTRASS_BASE):
    family = WeierstrassFourier(amplitude, beta, dim, base=base, terms=terms, seed=seed)
    return TargetDensity(DensityKind.GAUSSIAN_PERTURBATION, family, K=max(family.sup_abs_bound(), 1e-12),
                         beta=beta, name=f"weierstrass(beta={beta}, eps={amplitude})")


def ball_target(K=2.0, dim=2, family=None, beta=1.0):
    family = family or ZeroPerturbation(dim)
    return TargetDensity(DensityKind.BALL_SUPPORTED, family, K=K, beta=beta,
                         profile=PowerBarrierProfile(K), name=f"ball(K={K}, d={dim})")


FAMILY_KEYS = {
    FamilyVariant.ZERO: set(),
    FamilyVariant.CONJUGATE_GAUSSIAN: {'mean', 'sigma2'},
    FamilyVariant.LOG_MIXTURE_RATIO: {'weights', 'means', 'variances'},
    FamilyVariant.WEIERSTRASS_FOURIER: {'amplitude', 'base', 'terms', 'family_seed'},
}
DENSITY_KEYS = {'kind', 'family', 'dim', 'K', 'beta', 'profile'}


def density_from_mapping(block):
    """Build a TargetDensity from a parsed [density] block"""
    kind = DensityKind(block.get('kind', DensityKind.GAUSSIAN_PERTURBATION.value))
    variant = FamilyVariant(block.get('family', FamilyVariant.ZERO.value))
    dim = int(block.get('dim', 1))
    K = float(block.get('K', 1.0))
    beta = float(block.get('beta', 1.0))

    if variant == FamilyVariant.ZERO:
        family = ZeroPerturbation(dim)
    elif variant == FamilyVariant.CONJUGATE_GAUSSIAN:
        family = ConjugateGaussian(block.get('mean', 0.0), block.get('sigma2', 1.0), dim)
    elif variant == FamilyVariant.LOG_MIXTURE_RATIO:
        family = LogMixtureRatio(_as_list(block.get('weights', [0.5, 0.5])),
                                 _as_list(block.get('means', [1.2, -1.2])),
                                 _as_list(block.get('variances', [0.36, 0.36])), dim)
    elif variant == FamilyVariant.WEIERSTRASS_FOURIER:
        family = WeierstrassFourier(float(block.get('amplitude', 0.5)), beta, dim,
                                    base=float(block.get('base', Config.WEIERSTRASS_BASE)),
                                    terms=int(block.get('terms', Config.WEIERSTRASS_TERMS)),
                                    seed=int(block.get('family_seed', 0)))
    else:
        raise InvalidInputError(f"family '{variant.value}' cannot be built from a configuration")

    profile = None
    if kind == DensityKind.BALL_SUPPORTED:
        profile_name = block.get('profile', PowerBarrierProfile.name)
        if profile_name != PowerBarrierProfile.name:
            raise InvalidInputError(f"unknown boundary profile '{profile_name}'")
        profile = PowerBarrierProfile(K)
    return TargetDensity(kind, family, K=K, beta=beta, profile=profile)


def density_to_mapping(density):
    block = {
        'kind': density.kind.value,
        'family': density.family.variant.value,
        'dim': density.dim,
        'K': density.K,
        'beta': density.beta,
    }
    if density.is_ball:
        block['profile'] = getattr(density.profile, 'name', 'custom')
    block.update(density.family.parameters())
    return block


def _as_list(value):
    if isinstance(value, (list, tuple, np.ndarray)):
        return [float(v) for v in value]
    return [float(value)]
