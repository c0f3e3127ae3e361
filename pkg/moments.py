"""
Moments of the tilted measure p^{t,x}(y) proportional to phi^{t,x}(y) r(y).

phi^{t,x} is the Gaussian with mean t x and covariance (1 - t^2) I. All
integrals use the change of variables y = t x + sqrt(1 - t^2) z against the
standard Gaussian in z, so weights are exp(log r(y) - max) self-normalised and
the subtracted max is carried in log_Z = log Q_t r(x).
"""

from dataclasses import dataclass, replace
from enum import Enum
from functools import lru_cache
from typing import NamedTuple, Optional

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from config import Config
from errors import DegenerateMeasureError, DomainError, InvalidInputError
from logger_config import get_logger
from numerics_utils import Stream, stream_rng

logger = get_logger('heatflow.moments')

GH_MAX_DIM = 4
GH_ORDER_RANGE = (8, 128)
IS_SAMPLE_RANGE = (10**3, 10**7)
MIN_INSIDE_FRACTION = 1e-3
MIN_ESS = 50.0


class QuadratureMethod(str, Enum):
    GAUSS_HERMITE = 'gauss_hermite'
    IMPORTANCE_SAMPLING = 'importance_sampling'


@dataclass(frozen=True)
class QuadratureSpec:
    method: QuadratureMethod = QuadratureMethod.GAUSS_HERMITE
    dim: int = 1
    order: int = Config.GH_ORDER
    samples: int = Config.IS_SAMPLES
    antithetic: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'method', QuadratureMethod(self.method))
        if self.dim < 1:
            raise InvalidInputError(f"quadrature dimension must be positive, got {self.dim}")
        if self.method == QuadratureMethod.GAUSS_HERMITE:
            if self.dim > GH_MAX_DIM:
                raise InvalidInputError(
                    f"tensor Gauss-Hermite is limited to dim <= {GH_MAX_DIM}; use importance sampling"
                )
            if not GH_ORDER_RANGE[0] <= self.order <= GH_ORDER_RANGE[1]:
                raise InvalidInputError(f"Gauss-Hermite order must lie in {GH_ORDER_RANGE}, got {self.order}")
        elif not IS_SAMPLE_RANGE[0] <= self.samples <= IS_SAMPLE_RANGE[1]:
            raise InvalidInputError(f"importance sample count must lie in {IS_SAMPLE_RANGE}, got {self.samples}")

    @classmethod
    def gauss_hermite(cls, dim=1, order=Config.GH_ORDER):
        return cls(QuadratureMethod.GAUSS_HERMITE, dim=dim, order=order)

    @classmethod
    def importance(cls, dim=1, samples=Config.IS_SAMPLES, seed=0, antithetic=True):
        return cls(QuadratureMethod.IMPORTANCE_SAMPLING, dim=dim, samples=samples,
                   antithetic=antithetic, seed=seed)

    @property
    def is_gauss_hermite(self):
        return self.method == QuadratureMethod.GAUSS_HERMITE

    def escalated(self):
        """Same rule with the Gauss-Hermite order doubled, None when already maximal"""
        if not self.is_gauss_hermite or self.order >= GH_ORDER_RANGE[1]:
            return None
        return replace(self, order=min(2 * self.order, GH_ORDER_RANGE[1]))

    def resolution(self):
        return self.order if self.is_gauss_hermite else self.samples


@dataclass(frozen=True)
class NodeSet:
    z: np.ndarray       # (N, d) standard Gaussian nodes
    log_w: np.ndarray   # (N,) log quadrature weights summing to one


@lru_cache(maxsize=32)
def node_set(spec):
    """Immutable node set of a quadrature rule, shared by every (t, x)"""
    if spec.is_gauss_hermite:
        x, w = hermegauss(spec.order)
        log_w1 = np.log(w / np.sqrt(2.0 * np.pi))
        grids = np.meshgrid(*([x] * spec.dim), indexing='ij')
        z = np.stack([g.ravel() for g in grids], axis=-1)
        log_grids = np.meshgrid(*([log_w1] * spec.dim), indexing='ij')
        log_w = np.sum(np.stack([g.ravel() for g in log_grids], axis=-1), axis=-1)
    else:
        rng = stream_rng(spec.seed, Stream.IS_NODES, spec.samples, spec.dim)
        if spec.antithetic:
            half = rng.standard_normal((spec.samples // 2, spec.dim))
            z = np.vstack([half, -half])
        else:
            z = rng.standard_normal((spec.samples, spec.dim))
        log_w = np.full(len(z), -np.log(len(z)))
    z.setflags(write=False)
    log_w.setflags(write=False)
    return NodeSet(z=z, log_w=log_w)


@dataclass
class TiltedMoments:
    log_Z: float
    mean: np.ndarray
    cov: np.ndarray
    ess_or_order: float
    t: float
    x: np.ndarray
    mean_stderr: np.ndarray
    accuracy_warning: bool = False



@dataclass
class BatchMoments:
    log_Z: np.ndarray           # (B,)
    mean: np.ndarray            # (B, d)
    cov: np.ndarray             # (B, d, d)
    ess: np.ndarray             # (B,)
    inside_fraction: np.ndarray  # (B,)
    mean_stderr: np.ndarray     # (B, d)
    degenerate: np.ndarray      # (B,) bool
    z_mean: np.ndarray          # (B, d)    mean of z under the tilted weights
    z_cov: np.ndarray           # (B, d, d) covariance of z under the tilted weights
    grad_log_r_mean: Optional[np.ndarray] = None  # (B, d), integral of grad log r dp^{t,x}

    def row(self, b, t, x, quad):
        warning = (not quad.is_gauss_hermite) and self.ess[b] < MIN_ESS
        return TiltedMoments(
            log_Z=float(self.log_Z[b]), mean=self.mean[b], cov=self.cov[b],
            ess_or_order=float(self.ess[b]) if not quad.is_gauss_hermite else quad.order,
            t=float(t), x=np.asarray(x, dtype=float), mean_stderr=self.mean_stderr[b],
            accuracy_warning=bool(warning),
        )


def as_anchor_batch(t, x, dim):
    t = np.atleast_1d(np.asarray(t, dtype=float))
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(1, -1) if x.shape[0] == dim else x.reshape(-1, 1)
    if x.shape[1] != dim:
        raise InvalidInputError(f"anchor dimension {x.shape[1]} does not match density dimension {dim}")
    t = np.broadcast_to(t, (x.shape[0],))
    if np.any(~np.isfinite(t)) or np.any(t < 0.0) or np.any(t >= 1.0):
        raise DomainError(f"tilted measure needs t in [0, 1), got {t[(t < 0) | (t >= 1)][:3]}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("non-finite anchor point")
    return t, x


def _weigh(density, t, x, nodes):
    """Node locations and self-normalised weights for rows (t_b, x_b)"""
    s = np.sqrt(1.0 - t * t)
    y = t[:, None, None] * x[:, None, :] + s[:, None, None] * nodes.z[None, :, :]
    log_w = nodes.log_w[None, :] + density.log_r(y)
    finite = np.isfinite(log_w)
    inside_fraction = finite.mean(axis=1)
    top = np.max(np.where(finite, log_w, -np.inf), axis=1)
    safe_top = np.where(np.isfinite(top), top, 0.0)
    w = np.exp(np.where(finite, log_w - safe_top[:, None], -np.inf))
    total = w.sum(axis=1)
    ok = total > 0.0
    with np.errstate(divide='ignore', invalid='ignore'):
        p = w / total[:, None]
        log_Z = safe_top + np.log(total)
    return y, p, log_Z, inside_fraction, ok


def _reduce(z, p):
    """Weighted mean, covariance, ESS and mean standard error of the shared nodes z"""
    z_mean = p @ z
    H = z[None, :, :] - z_mean[:, None, :]
    z_cov = np.einsum('bn,bni,bnj->bij', p, H, H)
    z_cov = 0.5 * (z_cov + np.swapaxes(z_cov, 1, 2))
    with np.errstate(divide='ignore'):
        ess = 1.0 / np.sum(p * p, axis=1)
    stderr = np.sqrt(np.einsum('bn,bnd->bd', p * p, H * H))
    return z_mean, z_cov, ess, stderr


def _rows_per_chunk(nodes, dim):
    return max(1, Config.MAX_NODE_ELEMENTS // (len(nodes.z) * dim))


def _needs_escalation(density, quad, inside_fraction):
    return (density.is_ball and quad.is_gauss_hermite) & (np.asarray(inside_fraction) < MIN_INSIDE_FRACTION)


def tilted_moments_batch(density, t, x, quad, on_degenerate='raise', escalate=True, with_score=False):
    """Moments of p^{t_b, x_b} for every row b.

    Reductions run in the z coordinates and are mapped back with
    mean = t x + s z_mean and cov = s^2 z_cov, s = sqrt(1 - t^2).
    Rows whose measure degenerates raise DegenerateMeasureError, or come back as
    NaN with the degenerate flag set when on_degenerate='nan'. with_score also
    averages grad log r over the same weights.
    """
    t, x = as_anchor_batch(t, x, density.dim)
    B, d = x.shape
    nodes = node_set(quad)

    log_Z = np.empty(B)
    z_mean = np.empty((B, d))
    z_cov = np.empty((B, d, d))
    ess = np.empty(B)
    inside = np.empty(B)
    z_stderr = np.empty((B, d))
    ok = np.empty(B, dtype=bool)
    score = np.empty((B, d)) if with_score else None

    step = _rows_per_chunk(nodes, d)
    for start in range(0, B, step):
        rows = slice(start, min(start + step, B))
        y, p, lz, frac, good = _weigh(density, t[rows], x[rows], nodes)
        p = np.where(good[:, None], p, 0.0)
        z_mean[rows], z_cov[rows], ess[rows], z_stderr[rows] = _reduce(nodes.z, p)
        log_Z[rows], inside[rows], ok[rows] = lz, frac, good
        if with_score:
            grads = density.grad_log_r(y, strict=False)
            score[rows] = np.einsum('bn,bnd->bd', p, grads)

    thin = np.flatnonzero(_needs_escalation(density, quad, inside))
    bigger = quad.escalated()
    if escalate and thin.size and bigger is not None:
        logger.warning(f"{thin.size} anchor(s) have in-ball node fraction < {MIN_INSIDE_FRACTION:g}; "
                       f"escalating Gauss-Hermite order {quad.order} -> {bigger.order}")
        sub = tilted_moments_batch(density, t[thin], x[thin], bigger, on_degenerate='nan', escalate=False,
                                   with_score=with_score)
        log_Z[thin], z_mean[thin], z_cov[thin] = sub.log_Z, sub.z_mean, sub.z_cov
        ess[thin], inside[thin] = sub.ess, sub.inside_fraction
        z_stderr[thin] = sub.mean_stderr / np.sqrt(1.0 - t[thin] ** 2)[:, None]
        ok[thin] = ~sub.degenerate
        if with_score:
            score[thin] = sub.grad_log_r_mean

    degenerate = ~ok
    if np.any(degenerate):
        if on_degenerate == 'raise':
            b = int(np.flatnonzero(degenerate)[0])
            raise DegenerateMeasureError(
                f"tilted measure at t={t[b]:.6g}, x={x[b]} has no mass on the support "
                f"({int(degenerate.sum())} degenerate row(s))"
            )
        z_mean[degenerate] = np.nan
        z_cov[degenerate] = np.nan
        log_Z[degenerate] = -np.inf
        if with_score:
            score[degenerate] = np.nan

    if not quad.is_gauss_hermite and np.any(ess < MIN_ESS):
        logger.warning(f"importance sampling ESS below {MIN_ESS:g} for {int((ess < MIN_ESS).sum())} row(s)")

    s = np.sqrt(1.0 - t * t)
    mean = t[:, None] * x + s[:, None] * z_mean
    cov = (s * s)[:, None, None] * z_cov
    return BatchMoments(log_Z=log_Z, mean=mean, cov=cov, ess=ess, inside_fraction=inside,
                        mean_stderr=s[:, None] * z_stderr, degenerate=degenerate,
                        z_mean=z_mean, z_cov=z_cov, grad_log_r_mean=score)


def tilted_moments(density, t, x, quad):
    """log-normaliser, mean and covariance of p^{t,x}"""
    t_arr, x_arr = as_anchor_batch(t, x, density.dim)
    batch = tilted_moments_batch(density, t_arr[:1], x_arr[:1], quad)
    return batch.row(0, t_arr[0], x_arr[0], quad)


class TiltedMeasure(NamedTuple):
    y: np.ndarray      # (N, d) nodes carrying mass
    p: np.ndarray      # (N,) normalised weights
    log_Z: float
    mean: np.ndarray
    cov: np.ndarray
    quad: QuadratureSpec


def tilted_measure(density, t, x, quad):
    """Discretised p^{t,x} on the shared node set (escalated for thin ball anchors)"""
    t_arr, x_arr = as_anchor_batch(t, x, density.dim)
    t_arr, x_arr = t_arr[:1], x_arr[:1]
    y, p, log_Z, frac, ok = _weigh(density, t_arr, x_arr, node_set(quad))
    if _needs_escalation(density, quad, frac)[0] and quad.escalated() is not None:
        quad = quad.escalated()
        logger.warning(f"in-ball node fraction {frac[0]:.2e}; escalating to order {quad.order}")
        y, p, log_Z, frac, ok = _weigh(density, t_arr, x_arr, node_set(quad))
    if not ok[0]:
        raise DegenerateMeasureError(f"tilted measure at t={t_arr[0]:.6g}, x={x_arr[0]} has no mass")
    keep = p[0] > 0.0
    y, p = y[0][keep], p[0][keep]
    mean = p @ y
    H = y - mean
    cov = np.einsum('n,ni,nj->ij', p, H, H)
    return TiltedMeasure(y=y, p=p, log_Z=float(log_Z[0]), mean=mean, cov=0.5 * (cov + cov.T), quad=quad)


def _evaluate(f, y):
    values = np.asarray(f(y), dtype=float)
    if values.shape[0] != len(y):
        raise InvalidInputError("test function must be vectorised over rows of y")
    if not np.all(np.isfinite(values)):
        raise InvalidInputError("test function is not finite on the support")
    return values


def tilted_expectation(density, t, x, quad, f):
    """integral of f d p^{t,x}; f maps rows y (N, d) to (N, ...)"""
    measure = tilted_measure(density, t, x, quad)
    return np.tensordot(measure.p, _evaluate(f, measure.y), axes=(0, 0))


def _as_matrix_values(values):
    return values.reshape(len(values), -1)


def grad_pairing(density, t, x, quad, f):
    """integral of f(y) grad_x p^{t,x}(y) dy = t/(1-t^2) int f H^T dp^{t,x}; shape (m, d)"""
    measure = tilted_measure(density, t, x, quad)
    fy = _as_matrix_values(_evaluate(f, measure.y))
    if float(t) == 0.0:
        return np.zeros((fy.shape[1], density.dim))
    H = measure.y - measure.mean
    c = float(t) / (1.0 - float(t) ** 2)
    return c * np.einsum('n,nm,nd->md', measure.p, fy, H)


def hess_pairing(density, t, x, quad, f):
    """integral of f(y) Hess_x p^{t,x}(y) dy = (t/(1-t^2))^2 int f (H H^T - Cov) dp^{t,x}; (m, d, d)"""
    measure = tilted_measure(density, t, x, quad)
    fy = _as_matrix_values(_evaluate(f, measure.y))
    d = density.dim
    if float(t) == 0.0:
        return np.zeros((fy.shape[1], d, d))
    H = measure.y - measure.mean
    outer = H[:, :, None] * H[:, None, :] - measure.cov
    c = float(t) / (1.0 - float(t) ** 2)
    return c * c * np.einsum('n,nm,nij->mij', measure.p, fy, outer)


class ConcentrationRatios(NamedTuple):
    second: float   # max_i Cov_ii / (1 - t^2)
    fourth: float   # max_ij E[(H_i H_j - Cov_ij)^2] / (1 - t^2)^2


def moment_concentration(density, t, x, quad):
    measure = tilted_measure(density, t, x, quad)
    scale = 1.0 - float(t) ** 2
    H = measure.y - measure.mean
    centered = H[:, :, None] * H[:, None, :] - measure.cov
    fourth = np.einsum('n,nij->ij', measure.p, centered ** 2)
    return ConcentrationRatios(second=float(np.max(np.diag(measure.cov)) / scale),
                               fourth=float(np.max(fourth) / scale ** 2))


def default_quadrature(dim):
    """Tensor Gauss-Hermite where it is affordable, importance sampling beyond"""
    if dim <= GH_MAX_DIM:
        return QuadratureSpec.gauss_hermite(dim=dim)
    return QuadratureSpec.importance(dim=dim)
