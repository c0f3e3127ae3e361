"""
Embedded Runge-Kutta 5(4) integration of many independent trajectories.

Every row of the state carries its own time, step size and status, so a
particle near a sharp feature of the field shrinks its step without slowing
the rest of the batch.
"""

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Dict, List, Optional

import numpy as np

from config import Config
from logger_config import get_logger

logger = get_logger('heatflow.flow')

MIN_STEP = 1e-14
TRACE_LENGTH = 8
SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0


class StepStatus(IntEnum):
    RUNNING = 0
    DONE = 1
    STIFF = 2
    DIVERGED = 3
    MAX_STEPS = 4


@dataclass
class IntegrationResult:
    t: np.ndarray                   # (B,) final times
    y: np.ndarray                   # (B, n) final states
    status: np.ndarray              # (B,) StepStatus
    steps_accepted: np.ndarray      # (B,)
    steps_rejected: np.ndarray      # (B,)
    traces: Dict[int, List[tuple]] = field(default_factory=dict)
    times: Optional[List[List[float]]] = None
    states: Optional[List[List[np.ndarray]]] = None

    @property
    def failed(self):
        return np.flatnonzero(self.status != StepStatus.DONE)


class DormandPrince54:
    """Dormand-Prince 5(4) pair with first-same-as-last stage reuse.

    rhs(t, y) takes per-row times (B,) and states (B, n) and returns (B, n);
    rows it cannot evaluate come back non-finite. ceiling(t) bounds |h| per
    row. When bounded_slice is given, rows whose components in that slice
    leave the ball of radius bounding_radius are stopped as diverged.
    """

    C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
    A = [
        [],
        [1 / 5],
        [3 / 40, 9 / 40],
        [44 / 45, -56 / 15, 32 / 9],
        [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
        [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
        [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
    ]
    E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])

    def __init__(self, rhs: Callable, rel_tol=Config.REL_TOL, abs_tol=Config.ABS_TOL,
                 ceiling: Optional[Callable] = None, max_steps=Config.MAX_STEPS,
                 bounded_slice: Optional[slice] = None, bounding_radius=Config.BOUNDING_RADIUS,
                 initial_step=1e-3):
        self.rhs = rhs
        self.rel_tol = float(rel_tol)
        self.abs_tol = float(abs_tol)
        self.ceiling = ceiling or (lambda t: np.full(np.shape(t), np.inf))
        self.max_steps = int(max_steps)
        self.bounded_slice = bounded_slice
        self.bounding_radius = float(bounding_radius)
        self.initial_step = float(initial_step)

    def _error_norm(self, err, y_old, y_new):
        scale = self.abs_tol + self.rel_tol * np.maximum(np.abs(y_old), np.abs(y_new))
        return np.sqrt(np.mean((err / scale) ** 2, axis=1))

    def _out_of_box(self, y):
        if self.bounded_slice is None:
            return np.zeros(len(y), dtype=bool)
        return np.linalg.norm(y[:, self.bounded_slice], axis=1) > self.bounding_radius

    def _attempt(self, t, y, h, k1):
        """One trial step for the given rows; returns y5, k7 and the error norm"""
        k = [k1]
        for i in range(1, 7):
            increment = sum(a * kj for a, kj in zip(self.A[i], k) if a != 0.0)
            k.append(self.rhs(t + self.C[i] * h, y + h[:, None] * increment))
        y5 = y + h[:, None] * sum(a * kj for a, kj in zip(self.A[6], k[:6]) if a != 0.0)
        err = h[:, None] * sum(e * kj for e, kj in zip(self.E, k) if e != 0.0)
        with np.errstate(invalid='ignore', over='ignore'):
            norm = self._error_norm(err, y, y5)
        norm = np.where(np.all(np.isfinite(y5), axis=1) & np.all(np.isfinite(k[6]), axis=1), norm, np.inf)
        return y5, k[6], norm

    def integrate(self, t0, y0, t_end, record=False):
        """Advance every row of y0 from t0 to t_end (forward or backward)"""
        y = np.array(y0, dtype=float, copy=True)
        B = len(y)
        t = np.broadcast_to(np.asarray(t0, dtype=float), (B,)).copy()
        t_end = float(t_end)
        direction = 1.0 if np.all(t_end >= t) else -1.0

        status = np.full(B, StepStatus.RUNNING, dtype=int)
        accepted = np.zeros(B, dtype=int)
        rejected = np.zeros(B, dtype=int)
        h = np.minimum(self.initial_step, self.ceiling(t))
        hist = np.full((B, TRACE_LENGTH, 3), np.nan)
        traces = {}
        times = [[float(t[b])] for b in range(B)] if record else None
        states = [[y[b].copy()] for b in range(B)] if record else None

        status[(t_end - t) * direction <= 0.0] = StepStatus.DONE
        k1 = np.full_like(y, np.nan)
        running = status == StepStatus.RUNNING
        if np.any(running):
            k1[running] = self.rhs(t[running], y[running])
        bad = running & ~np.all(np.isfinite(k1), axis=1)
        status[bad] = StepStatus.DIVERGED
        for b in np.flatnonzero(bad):
            traces[int(b)] = [(float(t[b]), 0.0, np.inf)]

        while True:
            idx = np.flatnonzero(status == StepStatus.RUNNING)
            if idx.size == 0:
                break
            ti, yi = t[idx], y[idx]
            remaining = (t_end - ti) * direction
            magnitude = np.minimum(np.minimum(h[idx], self.ceiling(ti)), remaining)
            final = magnitude >= remaining
            step = direction * magnitude

            y5, k7, norm = self._attempt(ti, yi, step, k1[idx])
            ok = norm <= 1.0
            with np.errstate(divide='ignore'):
                factor = np.where(norm == 0.0, MAX_FACTOR,
                                  np.clip(SAFETY * norm ** -0.2, MIN_FACTOR, MAX_FACTOR))

            slot = (accepted[idx] + rejected[idx]) % TRACE_LENGTH
            hist[idx, slot] = np.column_stack([ti, step, norm])

            good = idx[ok]
            if good.size:
                t[good] = np.where(final[ok], t_end, ti[ok] + step[ok])
                y[good] = y5[ok]
                k1[good] = k7[ok]
                accepted[good] += 1
                h[good] = magnitude[ok] * factor[ok]
                status[good[t[good] == t_end]] = StepStatus.DONE
                escaped = good[self._out_of_box(y[good])]
                status[escaped] = StepStatus.DIVERGED
                if record:
                    for b in good:
                        times[b].append(float(t[b]))
                        states[b].append(y[b].copy())

            bad = idx[~ok]
            if bad.size:
                rejected[bad] += 1
                h[bad] = magnitude[~ok] * np.minimum(factor[~ok], SAFETY)
                status[bad[h[bad] < MIN_STEP]] = StepStatus.STIFF

            status[idx[(status[idx] == StepStatus.RUNNING) & (accepted[idx] >= self.max_steps)]] = \
                StepStatus.MAX_STEPS

            for b in idx[status[idx] > StepStatus.DONE]:
                order = np.argsort(np.nan_to_num(hist[b, :, 0] * direction, nan=-np.inf))
                traces[int(b)] = [tuple(float(v) for v in hist[b, j]) for j in order
                                  if np.isfinite(hist[b, j, 0])]
                logger.debug(f"row {b} stopped with status {StepStatus(status[b]).name} at t={t[b]:.10g}")

        return IntegrationResult(t=t, y=y, status=status, steps_accepted=accepted, steps_rejected=rejected,
                                 traces=traces, times=times, states=states)
