"""
Empirical regularity of the transport map: derivative tensors, Hoelder
quotients over shrinking pair scales and log-log exponent fits.
"""

import itertools
from dataclasses import dataclass, field, replace
from typing import List, NamedTuple, Optional

import numpy as np
import pandas as pd
from scipy import stats

from errors import DomainError, InsufficientDataError, InvalidInputError
from flow import FlowConfig, map_points
from logger_config import get_logger
from moments import default_quadrature
from numerics_utils import Stream, low_discrepancy_points, stream_rng, unit_sphere

logger = get_logger('heatflow.regularity')

FD_STEP_RANGE = (1e-5, 1e-1)
MAX_ORDER = 3
NOISE_MULTIPLE = 10.0
MIN_FIT_POINTS = 4
MIN_SCALES = 3
JACOBIAN_DRIFT = 1e-3


class ScalingFit(NamedTuple):
    slope: float
    intercept: float
    half_width: float
    n_scales: int


def fit_scaling_exponent(samples):
    """Least-squares slope of log value against log scale; half_width is two standard errors"""
    samples = [(float(h), float(v)) for h, v in samples]
    if len(samples) < MIN_FIT_POINTS:
        raise InsufficientDataError(f"need at least {MIN_FIT_POINTS} (scale, value) samples, got {len(samples)}")
    scales, values = np.array(samples).T
    if np.any(values <= 0) or np.any(scales <= 0):
        raise DomainError("scaling fit needs strictly positive scales and values")
    fit = stats.linregress(np.log(scales), np.log(values))
    return ScalingFit(slope=float(fit.slope), intercept=float(fit.intercept),
                      half_width=float(2.0 * fit.stderr), n_scales=len(samples))


# ---------------------------------------------------------------------------
# Derivative tensors
# ---------------------------------------------------------------------------

def _stencil(d, k):
    """Offsets (in units of h) and coefficients of the nested central difference of order k"""
    terms = []
    for axes in itertools.product(range(d), repeat=k):
        for signs in itertools.product((1, -1), repeat=k):
            offset = np.zeros(d, dtype=int)
            for axis, sign in zip(axes, signs):
                offset[axis] += sign
            terms.append((axes, tuple(offset), float(np.prod(signs))))
    return terms


def _finite_difference(density, points, k, h, cfg, quad, threads):
    """Order-k derivative tensors (n, d, d, ..., d) of T at every point"""
    d = density.dim
    terms = _stencil(d, k)
    offsets = sorted({offset for _, offset, _ in terms})
    lookup = {offset: j for j, offset in enumerate(offsets)}
    shifts = h * np.array(offsets, dtype=float)
    anchors = (points[:, None, :] + shifts[None, :, :]).reshape(-1, d)
    mapped = map_points(density, anchors, replace(cfg, with_jacobian=False), quad, threads)
    mapped.raise_for_failures()
    values = mapped.x_final.reshape(len(points), len(offsets), d)

    tensor = np.zeros((len(points), d) + (d,) * k)
    for axes, offset, sign in terms:
        tensor[(slice(None), slice(None)) + axes] += sign * values[:, lookup[offset], :]
    return tensor / (2.0 * h) ** k


def _propagated_jacobian(density, points, cfg, quad, threads):
    mapped = map_points(density, points, replace(cfg, with_jacobian=True), quad, threads)
    mapped.raise_for_failures()
    return mapped.jacobian, mapped.x_final


def derivative_probe(density, k, x, h, cfg=None, quad=None, use_jacobian=False, threads=1):
    """Central finite-difference tensor of T of order k at x with step h.

    For k = 1 the propagated Jacobian is either returned (use_jacobian) or
    used to cross-check the difference quotient.
    """
    cfg = cfg or FlowConfig()
    quad = quad or default_quadrature(density.dim)
    if k not in range(1, MAX_ORDER + 1):
        raise InvalidInputError(f"derivative order must be 1..{MAX_ORDER}, got {k}")
    if not FD_STEP_RANGE[0] <= h <= FD_STEP_RANGE[1]:
        raise InvalidInputError(f"finite-difference step must lie in {FD_STEP_RANGE}, got {h}")
    x = np.asarray(x, dtype=float).reshape(1, density.dim)

    if k == 1:
        jac, _ = _propagated_jacobian(density, x, cfg, quad, threads)
        if use_jacobian:
            return jac[0]
        fd = _finite_difference(density, x, 1, h, cfg, quad, threads)[0]
        drift = np.linalg.norm(fd - jac[0]) / max(np.linalg.norm(jac[0]), 1e-300)
        if drift > JACOBIAN_DRIFT:
            logger.warning(f"propagated Jacobian and finite differences differ by {drift:.2e} at x={x[0]}")
        return fd
    return _finite_difference(density, x, k, h, cfg, quad, threads)[0]


# ---------------------------------------------------------------------------
# Hoelder scans
# ---------------------------------------------------------------------------

@dataclass
class RegularityReport:
    lipschitz_est: float
    holder_quotients: List[tuple]           # (k, scale, quotient)
    fitted_exponent: Optional[ScalingFit]
    probe_spec: dict
    noise_floors: List[float] = field(default_factory=list)

    @property
    def resolved(self):
        return self.fitted_exponent is not None

    def quotient_table(self):
        rows = [{'scale': h, 'k': k, 'quotient': q, 'noise_floor': floor}
                for (k, h, q), floor in zip(self.holder_quotients, self.noise_floors)]
        return pd.DataFrame(rows, columns=['scale', 'k', 'quotient', 'noise_floor'])


def holder_exponent(density):
    """Fractional part of beta, or 1 when beta is an integer"""
    alpha = density.beta - np.floor(density.beta)
    return float(alpha) if alpha > 0 else 1.0


def noise_floor(scale, k, rel_tol, alpha, fd_step=None):
    """Quotient level below which differences are finite-difference or tolerance noise"""
    level = rel_tol if fd_step is None else NOISE_MULTIPLE * rel_tol / fd_step ** k
    return level / scale ** alpha


def _derivatives(density, points, k, fd_step, cfg, quad, threads):
    if k == 1:
        return _propagated_jacobian(density, points, cfg, quad, threads)
    mapped = map_points(density, points, replace(cfg, with_jacobian=False), quad, threads)
    mapped.raise_for_failures()
    return _finite_difference(density, points, k, fd_step, cfg, quad, threads), mapped.x_final


def holder_scan(density, k, pair_count, scales, region=3.0, seed=0, cfg=None, quad=None,
                alpha=None, fd_step=1e-3, threads=1):
    """Max over random pairs (x, x + h w) of ||D^k T(x) - D^k T(x + h w)|| per scale h"""
    cfg = cfg or FlowConfig()
    quad = quad or default_quadrature(density.dim)
    scales = np.asarray(scales, dtype=float)
    if k not in range(1, MAX_ORDER + 1):
        raise InvalidInputError(f"derivative order must be 1..{MAX_ORDER}, got {k}")
    if np.any(np.diff(scales) >= 0):
        raise InvalidInputError("pair scales must be strictly descending")
    if np.any(scales <= 0) or np.any(scales > FD_STEP_RANGE[1]):
        raise InvalidInputError(f"pair scales must lie in (0, {FD_STEP_RANGE[1]}]")
    if len(scales) < MIN_SCALES:
        raise InsufficientDataError(f"need at least {MIN_SCALES} pair scales, got {len(scales)}")
    alpha = holder_exponent(density) if alpha is None else float(alpha)
    d = density.dim

    base = low_discrepancy_points(pair_count, d, -region, region, seed=seed)
    directions = unit_sphere(stream_rng(seed, Stream.HOLDER_PAIRS, pair_count, d), pair_count, d)
    partners = base[None, :, :] + scales[:, None, None] * directions[None, :, :]
    points = np.vstack([base, partners.reshape(-1, d)])

    derivs, images = _derivatives(density, points, k, fd_step, cfg, quad, threads)
    n = pair_count
    base_d, base_T = derivs[:n], images[:n]

    quotients, floors, usable, lipschitz = [], [], [], 0.0
    for j, h in enumerate(scales):
        rows = slice(n * (j + 1), n * (j + 2))
        diff = (derivs[rows] - base_d).reshape(n, -1)
        largest = float(np.max(np.linalg.norm(diff, axis=1)))
        lipschitz = max(lipschitz, float(np.max(np.linalg.norm(images[rows] - base_T, axis=1)) / h))
        floor = noise_floor(h, k, cfg.rel_tol, alpha, None if k == 1 else fd_step)
        quotients.append((k, float(h), largest / h ** alpha))
        floors.append(floor)
        if largest / h ** alpha > NOISE_MULTIPLE * floor:
            usable.append((float(h), largest))

    fit = fit_scaling_exponent(usable) if len(usable) >= MIN_FIT_POINTS else None
    if fit is None:
        logger.info(f"holder scan k={k}: {len(usable)} scale(s) above noise, exponent not fitted")
    else:
        logger.info(f"holder scan k={k}: fitted exponent {fit.slope:.3f} +- {fit.half_width:.3f}")
    probe_spec = {'k': k, 'pair_count': pair_count, 'scales': scales.tolist(), 'region': region,
                  'seed': seed, 'alpha': alpha, 'fd_step': None if k == 1 else fd_step,
                  'rel_tol': cfg.rel_tol}
    return RegularityReport(lipschitz_est=lipschitz, holder_quotients=quotients, fitted_exponent=fit,
                            probe_spec=probe_spec, noise_floors=floors)


@dataclass
class LipschitzProfile:
    table: pd.DataFrame
    growth: Optional[ScalingFit]


def lipschitz_profile(density, radii, pair_count, seed=0, cfg=None, quad=None, pair_scale=0.05, threads=1):
    """Local Lipschitz estimate of T on nested boxes [-R, R]^d.

    One pair set is drawn in the largest box; each radius keeps the pairs
    with both ends inside, so the estimate is non-decreasing in R.
    """
    cfg = cfg or FlowConfig()
    quad = quad or default_quadrature(density.dim)
    radii = np.sort(np.asarray(radii, dtype=float))
    if np.any(radii <= 0):
        raise InvalidInputError("radii must be positive")
    d = density.dim
    outer = float(radii[-1])
    base = low_discrepancy_points(pair_count, d, -outer, outer, seed=seed)
    directions = unit_sphere(stream_rng(seed, Stream.HOLDER_PAIRS, pair_count, d, 1), pair_count, d)
    partners = base + pair_scale * directions
    mapped = map_points(density, np.vstack([base, partners]), replace(cfg, with_jacobian=False), quad, threads)
    mapped.raise_for_failures()
    ratios = np.linalg.norm(mapped.x_final[pair_count:] - mapped.x_final[:pair_count], axis=1) / pair_scale
    reach = np.maximum(np.max(np.abs(base), axis=1), np.max(np.abs(partners), axis=1))

    rows = []
    for radius in radii:
        inside = reach <= radius
        rows.append({'radius': radius, 'lipschitz_est': float(np.max(ratios[inside])) if np.any(inside) else 0.0,
                     'pairs': int(inside.sum())})
    table = pd.DataFrame(rows, columns=['radius', 'lipschitz_est', 'pairs'])
    positive = table[table['lipschitz_est'] > 0]
    growth = None
    if len(positive) >= MIN_FIT_POINTS:
        growth = fit_scaling_exponent(zip(positive['radius'], positive['lipschitz_est']))
    return LipschitzProfile(table=table, growth=growth)
