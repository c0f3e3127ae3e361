"""
The transport velocity V(t, x), its Jacobian and the diffusion score.

V(t, x) = (1/t) grad log Q_t r(x) is evaluated without the 1/t factor, either
from the tilted mean, (mean - t x) / (1 - t^2), or from the averaged gradient
of log r under p^{t,x}. The Jacobian uses the covariance identity

    grad V = t/(1-t^2)^2 Cov - t/(1-t^2) I.
"""

from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Optional

import numpy as np
import pandas as pd

from errors import CapabilityError, DomainError
from logger_config import get_logger
from moments import as_anchor_batch, tilted_moments_batch
from numerics_utils import low_discrepancy_points

logger = get_logger('heatflow.velocity')

SWEEP_POINTS = 256
SWEEP_BOX = 3.0


class VelocityMode(str, Enum):
    MOMENT = 'moment'
    IBP = 'ibp'


@dataclass
class VelocityEval:
    v: np.ndarray
    jac: Optional[np.ndarray]
    mode: VelocityMode
    t: float
    x: np.ndarray


class FieldValues(NamedTuple):
    v: np.ndarray                 # (B, d)
    jac: Optional[np.ndarray]     # (B, d, d)
    log_Z: np.ndarray             # (B,)
    degenerate: np.ndarray        # (B,) bool


def default_mode(density):
    """Averaged-gradient form when a gradient exists off a ball, tilted mean otherwise"""
    if density.smoothness_order >= 1 and not density.is_ball:
        return VelocityMode.IBP
    return VelocityMode.MOMENT


def _resolve_mode(density, mode):
    mode = default_mode(density) if mode is None else VelocityMode(mode)
    if mode == VelocityMode.IBP and density.smoothness_order < 1:
        raise CapabilityError("integrated-by-parts velocity needs a density with a gradient")
    return mode


def velocity_field(density, t, x, quad, mode=None, with_jacobian=False, on_degenerate='raise'):
    """V(t_b, x_b) for a batch of rows, optionally with grad V"""
    mode = _resolve_mode(density, mode)
    t, x = as_anchor_batch(t, x, density.dim)
    batch = tilted_moments_batch(density, t, x, quad, on_degenerate=on_degenerate,
                                 with_score=(mode == VelocityMode.IBP))
    s = np.sqrt(1.0 - t * t)
    if mode == VelocityMode.IBP:
        v = batch.grad_log_r_mean
    else:
        # (mean - t x) / (1 - t^2) written in z coordinates
        v = batch.z_mean / s[:, None]

    jac = None
    if with_jacobian:
        c = t / (1.0 - t * t)
        jac = c[:, None, None] * (batch.z_cov - np.eye(density.dim))
        jac = 0.5 * (jac + np.swapaxes(jac, 1, 2))
    return FieldValues(v=v, jac=jac, log_Z=batch.log_Z, degenerate=batch.degenerate)


def velocity(density, t, x, quad, mode=None, with_jacobian=False):
    t_arr, x_arr = as_anchor_batch(t, x, density.dim)
    mode = _resolve_mode(density, mode)
    field = velocity_field(density, t_arr[:1], x_arr[:1], quad, mode=mode, with_jacobian=with_jacobian)
    return VelocityEval(v=field.v[0], jac=None if field.jac is None else field.jac[0],
                        mode=mode, t=float(t_arr[0]), x=x_arr[0])


def velocity_jacobian(density, t, x, quad):
    """grad V(t, x) from the tilted covariance; the zero matrix at t = 0"""
    t_arr, x_arr = as_anchor_batch(t, x, density.dim)
    if t_arr[0] == 0.0:
        return np.zeros((density.dim, density.dim))
    field = velocity_field(density, t_arr[:1], x_arr[:1], quad, mode=VelocityMode.MOMENT,
                           with_jacobian=True)
    return field.jac[0]


def log_marginal(density, t, x, quad):
    """-||x||^2/2 + log Q_t r(x), the unnormalised log density of the flow at time t"""
    t_arr, x_arr = as_anchor_batch(t, x, density.dim)
    batch = tilted_moments_batch(density, t_arr, x_arr, quad)
    values = -0.5 * np.sum(x_arr * x_arr, axis=1) + batch.log_Z
    return float(values[0]) if len(values) == 1 else values


def score(density, tau, x, quad, mode=None):
    """grad log of the Ornstein-Uhlenbeck marginal at time tau started from p"""
    tau = float(tau)
    x = np.asarray(x, dtype=float).reshape(density.dim)
    if not np.isfinite(tau) or tau < 0.0:
        raise DomainError(f"score needs tau >= 0, got {tau}")
    if tau == 0.0:
        if density.smoothness_order < 1:
            raise DomainError("score at tau = 0 is grad log p, which this density does not expose")
        return -x + density.grad_log_r(x[None, :])[0]
    u = np.exp(-tau)
    return -x + u * velocity(density, u, x, quad, mode=mode).v


def score_jacobian_eigmax(density, tau, x, quad):
    """lambda_max(grad s(tau, x) + I) = lambda_max(e^-tau grad V(e^-tau, x))"""
    tau = float(tau)
    if not np.isfinite(tau) or tau <= 0.0:
        raise DomainError(f"score Jacobian bound needs tau > 0, got {tau}")
    u = np.exp(-tau)
    jac = velocity_jacobian(density, u, x, quad)
    return float(np.linalg.eigvalsh(u * jac)[-1])


# ---------------------------------------------------------------------------
# Sweeps feeding the scaling fits
# ---------------------------------------------------------------------------

def sweep_points(density, n=SWEEP_POINTS, seed=0):
    """Fixed low-discrepancy sweep set: [-3, 3]^d, or the unit ball for ball targets"""
    if not density.is_ball:
        return low_discrepancy_points(n, density.dim, -SWEEP_BOX, SWEEP_BOX, seed=seed)
    candidates = low_discrepancy_points(4 * n, density.dim, -1.0, 1.0, seed=seed)
    inside = candidates[np.linalg.norm(candidates, axis=1) < 1.0]
    return inside[:n]


def gradient_scaling_sweep(density, one_minus_t2, quad, points=None):
    """sup over the sweep set of ||grad V(t, .)|| and lambda_max(grad V(t, .))"""
    points = sweep_points(density) if points is None else np.asarray(points, dtype=float)
    rows = []
    for gap in np.asarray(one_minus_t2, dtype=float):
        if not 0.0 < gap <= 1.0:
            raise DomainError(f"1 - t^2 must lie in (0, 1], got {gap}")
        t = np.sqrt(1.0 - gap)
        field = velocity_field(density, np.full(len(points), t), points, quad,
                               mode=VelocityMode.MOMENT, with_jacobian=True, on_degenerate='nan')
        usable = ~field.degenerate
        if not np.any(usable):
            raise DomainError(f"every sweep point is degenerate at 1 - t^2 = {gap:g}")
        jac = field.jac[usable]
        norms = np.linalg.norm(jac, ord=2, axis=(1, 2))
        lam = np.linalg.eigvalsh(jac)[:, -1]
        rows.append({'one_minus_t2': gap, 't': t,
                     'sup_norm': float(np.max(norms)), 'sup_lambda_max': float(np.max(lam))})
        logger.debug(f"sweep 1-t^2={gap:.3e}: sup|grad V|={rows[-1]['sup_norm']:.4e}, "
                     f"sup lambda_max={rows[-1]['sup_lambda_max']:.4e}")
    return pd.DataFrame(rows, columns=['one_minus_t2', 't', 'sup_norm', 'sup_lambda_max'])


def score_eigmax_sweep(density, taus, quad, points=None):
    """sup over the sweep set of lambda_max(grad s(tau, .) + I)"""
    points = sweep_points(density) if points is None else np.asarray(points, dtype=float)
    rows = []
    for tau in np.asarray(taus, dtype=float):
        if not tau > 0.0:
            raise DomainError(f"score Jacobian bound needs tau > 0, got {tau}")
        u = np.exp(-tau)
        field = velocity_field(density, np.full(len(points), u), points, quad,
                               mode=VelocityMode.MOMENT, with_jacobian=True, on_degenerate='nan')
        jac = field.jac[~field.degenerate]
        lam = np.linalg.eigvalsh(u * jac)[:, -1]
        rows.append({'tau': tau, 'sup_eigmax': float(np.max(lam))})
    return pd.DataFrame(rows, columns=['tau', 'sup_eigmax'])


def positive_part_rows(frame, column):
    """Rows where a one-sided lambda_max bound is informative (value > 0)"""
    return frame[frame[column] > 0.0]
