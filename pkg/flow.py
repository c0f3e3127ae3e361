"""
Transport ODE dX/dt = V(t, X) from t = 0 towards t = 1.

The endpoint t = 1 is never reached: runs stop at t_end < 1 and report a
tail bound for the remaining stretch. With with_jacobian the state is
augmented with J (dJ/dt = grad V J, J(0) = I) and with the running integral
of lambda_max(grad V), which bounds log ||J||.
"""

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional

import numpy as np

from config import Config
from errors import DivergenceError, DomainError, InvalidInputError, OutsideSupportError, StiffnessError
from integrator import DormandPrince54, StepStatus
from logger_config import get_logger
from moments import default_quadrature
from numerics_utils import Stream, batch_slices, ordered_map, stream_rng
from velocity import velocity_field

logger = get_logger('heatflow.flow')

LOG_SWITCH_T = 0.1
TAU_MAX = 14.0
PUSHFORWARD_CHUNK = 1024


class TimeParametrization(str, Enum):
    DIRECT = 'direct'
    LOG_SWITCH = 'log_switch'


@dataclass(frozen=True)
class FlowConfig:
    t_end: float = Config.T_END
    rel_tol: float = Config.REL_TOL
    abs_tol: float = Config.ABS_TOL
    max_step_fraction: float = Config.MAX_STEP_FRACTION
    with_jacobian: bool = False
    time_parametrization: TimeParametrization = TimeParametrization.DIRECT
    bounding_radius: float = Config.BOUNDING_RADIUS
    max_steps: int = Config.MAX_STEPS
    batch_size: int = Config.BATCH_SIZE
    mode: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, 'time_parametrization', TimeParametrization(self.time_parametrization))
        if not 0.0 < self.t_end < 1.0:
            raise InvalidInputError(f"t_end must lie in (0, 1), got {self.t_end}")
        if not 0.0 < self.max_step_fraction <= 0.5:
            raise InvalidInputError(f"max_step_fraction must lie in (0, 0.5], got {self.max_step_fraction}")
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise InvalidInputError("integrator tolerances must be positive")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be positive")


@dataclass
class FlowResult:
    x0: np.ndarray
    x_final: np.ndarray
    times: List[float]
    states: List[np.ndarray]
    jacobian: Optional[np.ndarray]
    steps_accepted: int
    steps_rejected: int
    tail_bound: float
    log_growth_bound: Optional[float] = None


@dataclass
class BatchFlowResult:
    x0: np.ndarray
    x_final: np.ndarray
    tail_bound: np.ndarray
    steps: np.ndarray
    status: np.ndarray
    jacobian: Optional[np.ndarray] = None
    log_growth_bound: Optional[np.ndarray] = None
    traces: dict = field(default_factory=dict)

    @property
    def failed_indices(self):
        return np.flatnonzero(self.status != StepStatus.DONE)

    def raise_for_failures(self):
        failed = self.failed_indices
        if failed.size == 0:
            return self
        first = int(failed[0])
        message = (f"{failed.size} trajectory(ies) failed, first at index {first} "
                   f"(x0={self.x0[first]}, status {StepStatus(self.status[first]).name})")
        if self.status[first] == StepStatus.DIVERGED:
            raise DivergenceError(message)
        raise StiffnessError(message, trace=self.traces.get(first))


class _FlowField:
    """Right-hand side on the packed state [x, vec(J), log growth]"""

    def __init__(self, density, quad, mode, with_jacobian, time_map=None):
        self.density = density
        self.quad = quad
        self.mode = mode
        self.with_jacobian = with_jacobian
        self.d = density.dim
        # time_map(s) -> (u, du/ds): the field is evaluated at smoothing time u
        self.time_map = time_map or (lambda s: (s, np.ones_like(s)))

    def pack(self, x):
        x = np.asarray(x, dtype=float)
        if not self.with_jacobian:
            return x.copy()
        n, d = x.shape
        eye = np.broadcast_to(np.eye(d).ravel(), (n, d * d))
        return np.hstack([x, eye, np.zeros((n, 1))])

    def unpack(self, state):
        d = self.d
        x = state[:, :d]
        if not self.with_jacobian:
            return x, None, None
        return x, state[:, d:d + d * d].reshape(-1, d, d), state[:, -1]

    def __call__(self, s, state):
        u, rate = self.time_map(np.asarray(s, dtype=float))
        out = np.full_like(state, np.nan)
        usable = np.all(np.isfinite(state), axis=1)
        if not np.any(usable):
            return out
        x, J, _ = self.unpack(state[usable])
        values = velocity_field(self.density, u[usable], x, self.quad, mode=self.mode,
                                with_jacobian=self.with_jacobian, on_degenerate='nan')
        rate = rate[usable]
        rows = np.flatnonzero(usable)
        d = self.d
        out[rows, :d] = rate[:, None] * values.v
        if self.with_jacobian:
            out[rows, d:d + d * d] = (rate[:, None, None] * (values.jac @ J)).reshape(len(rows), d * d)
            out[rows, -1] = rate * np.linalg.eigvalsh(np.nan_to_num(values.jac, nan=0.0))[:, -1]
            out[rows[values.degenerate], -1] = np.nan
        return out


def _direct_ceiling(fraction):
    return lambda t: fraction * (1.0 - np.asarray(t))


def _solver(rhs, cfg, ceiling, d):
    return DormandPrince54(rhs, rel_tol=cfg.rel_tol, abs_tol=cfg.abs_tol, ceiling=ceiling,
                           max_steps=cfg.max_steps, bounded_slice=slice(0, d),
                           bounding_radius=cfg.bounding_radius)


def tail_bound(speed, t_end):
    """Estimate of the distance still to travel after t_end, assuming
    ||V(t)|| <= C (1 - t^2)^(-1/2) with C fitted at t_end"""
    return np.asarray(speed) * np.sqrt(1.0 - t_end ** 2) * np.arccos(t_end)


def _endpoint_speed(density, t_end, x, quad, mode):
    values = velocity_field(density, np.full(len(x), t_end), x, quad, mode=mode, on_degenerate='nan')
    return np.linalg.norm(values.v, axis=1)


def _check_anchors(density, x0):
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 1:
        x0 = x0.reshape(1, -1) if x0.shape[0] == density.dim else x0.reshape(-1, 1)
    if x0.shape[1] != density.dim:
        raise InvalidInputError(f"anchors have dimension {x0.shape[1]}, density has {density.dim}")
    if not np.all(np.isfinite(x0)):
        raise InvalidInputError("non-finite anchor point")
    return x0


def _forward(density, x0, cfg, quad, record=False):
    """Integrate a batch of anchors from t = 0 to cfg.t_end"""
    d = density.dim
    flow_field = _FlowField(density, quad, cfg.mode, cfg.with_jacobian)
    state = flow_field.pack(x0)
    accepted = np.zeros(len(x0), dtype=int)
    rejected = np.zeros(len(x0), dtype=int)
    t_start = 0.0
    prefix_times, prefix_states = None, None

    if cfg.time_parametrization == TimeParametrization.LOG_SWITCH:
        # dX/dtau = -e^-tau V(e^-tau, X) with tau = -log t, from TAU_MAX down to -log 0.1
        log_field = _FlowField(density, quad, cfg.mode, cfg.with_jacobian,
                               time_map=lambda tau: (np.exp(-tau), -np.exp(-tau)))
        t_floor = np.exp(-TAU_MAX)
        # first-order start from t = 0 across [0, e^-TAU_MAX]
        state = state + t_floor * np.nan_to_num(flow_field(np.zeros(len(state)), state))
        solver = DormandPrince54(log_field, rel_tol=cfg.rel_tol, abs_tol=cfg.abs_tol, max_steps=cfg.max_steps,
                                 bounded_slice=slice(0, d), bounding_radius=cfg.bounding_radius,
                                 ceiling=lambda tau: np.full(np.shape(tau), 1.0))
        early = solver.integrate(TAU_MAX, state, -np.log(LOG_SWITCH_T), record=record)
        state = early.y
        accepted += early.steps_accepted
        rejected += early.steps_rejected
        t_start = LOG_SWITCH_T
        if record:
            prefix_times = [[float(np.exp(-tau)) for tau in row] for row in early.times]
            prefix_states = early.states
        if np.any(early.status != StepStatus.DONE):
            return early, flow_field, accepted, rejected, prefix_times, prefix_states

    solver = _solver(flow_field, cfg, _direct_ceiling(cfg.max_step_fraction), d)
    late = solver.integrate(t_start, state, cfg.t_end, record=record)
    late.steps_accepted += accepted
    late.steps_rejected += rejected
    return late, flow_field, late.steps_accepted, late.steps_rejected, prefix_times, prefix_states


def _batch_result(density, x0, run, flow_field, cfg, quad, t_end):
    x, J, growth = flow_field.unpack(run.y)
    done = run.status == StepStatus.DONE
    bound = np.full(len(x0), np.nan)
    if np.any(done):
        bound[done] = tail_bound(_endpoint_speed(density, t_end, x[done], quad, cfg.mode), t_end)
    return BatchFlowResult(x0=x0, x_final=x.copy(), tail_bound=bound, steps=run.steps_accepted.copy(),
                           status=run.status.copy(), jacobian=None if J is None else J.copy(),
                           log_growth_bound=None if growth is None else growth.copy(), traces=run.traces)


def _concat(parts, x0, with_jacobian):
    offsets = np.cumsum([0] + [len(p.x0) for p in parts])
    traces = {}
    for offset, part in zip(offsets, parts):
        traces.update({int(offset) + k: v for k, v in part.traces.items()})
    return BatchFlowResult(
        x0=x0,
        x_final=np.vstack([p.x_final for p in parts]),
        tail_bound=np.concatenate([p.tail_bound for p in parts]),
        steps=np.concatenate([p.steps for p in parts]),
        status=np.concatenate([p.status for p in parts]),
        jacobian=np.concatenate([p.jacobian for p in parts]) if with_jacobian else None,
        log_growth_bound=np.concatenate([p.log_growth_bound for p in parts]) if with_jacobian else None,
        traces=traces,
    )


def map_points(density, x0, cfg=None, quad=None, threads=1):
    """Transport many anchors; batches are fixed by cfg.batch_size, not by thread count"""
    cfg = cfg or FlowConfig()
    quad = quad or default_quadrature(density.dim)
    x0 = _check_anchors(density, x0)

    def run_batch(rows):
        chunk = x0[rows]
        run, flow_field, _, _, _, _ = _forward(density, chunk, cfg, quad)
        return _batch_result(density, chunk, run, flow_field, cfg, quad, cfg.t_end)

    parts = ordered_map(run_batch, batch_slices(len(x0), cfg.batch_size), threads)
    result = _concat(parts, x0, cfg.with_jacobian)
    if result.failed_indices.size:
        logger.warning(f"{result.failed_indices.size} of {len(x0)} trajectories failed "
                       f"for {density.describe()}")
    return result


def integrate_flow(density, x0, cfg=None, quad=None):
    """Single trajectory with its recorded time grid"""
    cfg = cfg or FlowConfig()
    quad = quad or default_quadrature(density.dim)
    x0 = _check_anchors(density, x0)[:1]
    run, flow_field, accepted, rejected, prefix_times, prefix_states = _forward(density, x0, cfg, quad,
                                                                                record=True)
    batch = _batch_result(density, x0, run, flow_field, cfg, quad, cfg.t_end)
    batch.raise_for_failures()

    times, states = run.times[0], [flow_field.unpack(s[None])[0][0] for s in run.states[0]]
    if prefix_times is not None:
        early = [flow_field.unpack(s[None])[0][0] for s in prefix_states[0]]
        times = [0.0] + prefix_times[0] + times[1:]
        states = [x0[0].copy()] + early + states[1:]
    result = FlowResult(
        x0=x0[0], x_final=batch.x_final[0], times=times, states=states,
        jacobian=None if batch.jacobian is None else batch.jacobian[0],
        steps_accepted=int(accepted[0]), steps_rejected=int(rejected[0]),
        tail_bound=float(batch.tail_bound[0]),
        log_growth_bound=None if batch.log_growth_bound is None else float(batch.log_growth_bound[0]),
    )
    logger.debug(f"flow from {x0[0]} -> {result.x_final} in {result.steps_accepted} steps "
                 f"({result.steps_rejected} rejected), tail bound {result.tail_bound:.3e}")
    return result


def langevin_flow(density, x0, s_horizon, cfg=None, quad=None):
    """Langevin map L_{s,s}(x0): dL/dt = u V(u, L) with u = e^-(s - t).

    Time runs over [0, s + log t_end] so that the smoothing time stops at
    t_end; the tail bound is the same as for the transport flow.
    """
    cfg = cfg or FlowConfig()
    quad = quad or default_quadrature(density.dim)
    s_horizon = float(s_horizon)
    if not 1.0 <= s_horizon <= 40.0:
        raise DomainError(f"Langevin horizon must lie in [1, 40], got {s_horizon}")
    x0 = _check_anchors(density, x0)[:1]
    d = density.dim

    def smoothing_time(t):
        u = np.exp(-(s_horizon - t))
        return u, u

    flow_field = _FlowField(density, quad, cfg.mode, cfg.with_jacobian, time_map=smoothing_time)
    t_stop = s_horizon + np.log(cfg.t_end)

    def ceiling(t):
        u = np.exp(-(s_horizon - np.asarray(t)))
        return cfg.max_step_fraction * (1.0 - u) / u

    solver = _solver(flow_field, cfg, ceiling, d)
    run = solver.integrate(0.0, flow_field.pack(x0), t_stop, record=True)
    batch = _batch_result(density, x0, run, flow_field, cfg, quad, cfg.t_end)
    batch.raise_for_failures()
    return FlowResult(
        x0=x0[0], x_final=batch.x_final[0], times=run.times[0],
        states=[flow_field.unpack(s[None])[0][0] for s in run.states[0]],
        jacobian=None if batch.jacobian is None else batch.jacobian[0],
        steps_accepted=int(run.steps_accepted[0]), steps_rejected=int(run.steps_rejected[0]),
        tail_bound=float(batch.tail_bound[0]),
        log_growth_bound=None if batch.log_growth_bound is None else float(batch.log_growth_bound[0]),
    )


def inverse_points(density, y, cfg=None, quad=None, threads=1):
    """T^{-1} on many points by integrating the flow backward from t_end to 0"""
    cfg = cfg or FlowConfig()
    quad = quad or default_quadrature(density.dim)
    y = _check_anchors(density, y)
    if density.is_ball and np.any(np.linalg.norm(y, axis=1) >= 1.0):
        raise OutsideSupportError("inverse map needs points strictly inside the unit ball")
    backward_cfg = replace(cfg, with_jacobian=False)

    def run_batch(rows):
        chunk = y[rows]
        flow_field = _FlowField(density, quad, cfg.mode, False)
        solver = _solver(flow_field, backward_cfg, _direct_ceiling(cfg.max_step_fraction), density.dim)
        run = solver.integrate(cfg.t_end, flow_field.pack(chunk), 0.0)
        return run

    runs = ordered_map(run_batch, batch_slices(len(y), cfg.batch_size), threads)
    x0 = np.vstack([run.y for run in runs])
    status = np.concatenate([run.status for run in runs])
    failed = np.flatnonzero(status != StepStatus.DONE)
    if failed.size:
        first = int(failed[0])
        message = (f"backward trajectory from y={y[first]} failed with status {StepStatus(status[first]).name} "
                   f"({failed.size} failure(s))")
        if status[first] == StepStatus.DIVERGED:
            raise DivergenceError(message)
        raise StiffnessError(message)
    return x0


def inverse_map(density, y, cfg=None, quad=None):
    return inverse_points(density, y, cfg, quad)[0]


@dataclass
class PushforwardCloud:
    points: np.ndarray
    failed_indices: np.ndarray
    t_stop: float


def gaussian_draws(n, dim, seed, tag=Stream.PUSHFORWARD):
    """Standard normal rows keyed by (seed, tag, chunk index)"""
    chunks = []
    for start in range(0, n, PUSHFORWARD_CHUNK):
        size = min(PUSHFORWARD_CHUNK, n - start)
        chunks.append(stream_rng(seed, tag, start // PUSHFORWARD_CHUNK).standard_normal((size, dim)))
    return np.vstack(chunks)


def pushforward_samples(density, n, t_stop, seed, cfg=None, quad=None, threads=1):
    """Push n Gaussian draws through the flow up to min(t_stop, t_end)"""
    cfg = cfg or FlowConfig()
    if n < 1:
        raise InvalidInputError("sample count must be positive")
    if not 0.0 < t_stop <= 1.0:
        raise DomainError(f"t_stop must lie in (0, 1], got {t_stop}")
    stop = min(float(t_stop), cfg.t_end)
    x0 = gaussian_draws(n, density.dim, seed)
    result = map_points(density, x0, replace(cfg, t_end=stop, with_jacobian=False), quad, threads)
    failed = result.failed_indices
    if failed.size:
        logger.warning(f"pushforward: {failed.size} particle(s) failed, first indices {failed[:5].tolist()}")
    keep = np.ones(n, dtype=bool)
    keep[failed] = False
    return PushforwardCloud(points=result.x_final[keep], failed_indices=failed, t_stop=stop)


def anisotropic_transport(source, target, x, source_scale, target_scale, source_mean=0.0, target_mean=0.0,
                          cfg=None, quad_source=None, quad_target=None, threads=1):
    """Map between diagonal-covariance versions of two isotropic-form densities.

    T = (m_q + S_q .) o T_q o T_p^{-1} o S_p^{-1} (. - m_p)
    """
    if source.dim != target.dim:
        raise InvalidInputError("source and target dimensions differ")
    d = source.dim
    s_p = np.broadcast_to(np.asarray(source_scale, dtype=float), (d,))
    s_q = np.broadcast_to(np.asarray(target_scale, dtype=float), (d,))
    if np.any(s_p <= 0) or np.any(s_q <= 0):
        raise InvalidInputError("diagonal scales must be positive")
    m_p = np.broadcast_to(np.asarray(source_mean, dtype=float), (d,))
    m_q = np.broadcast_to(np.asarray(target_mean, dtype=float), (d,))

    x = _check_anchors(source, x)
    z = inverse_points(source, (x - m_p) / s_p, cfg, quad_source, threads)
    mapped = map_points(target, z, replace(cfg or FlowConfig(), with_jacobian=False), quad_target, threads)
    mapped.raise_for_failures()
    return m_q + s_q * mapped.x_final
