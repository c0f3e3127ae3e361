"""
Independent oracles and statistical checks for the transport map.

The 1D oracle is the monotone rearrangement F_p^{-1}(Phi(x)), built from an
adaptive-quadrature CDF table and polished by root finding. The remaining
checks compare sample clouds (Kolmogorov-Smirnov, sliced W1), the law of the
flow at intermediate times, and a log-Sobolev type ratio over a family of
smooth test functions.
"""

import math
from dataclasses import asdict, dataclass, replace
from typing import List, NamedTuple, Optional, Sequence

import numpy as np
from numpy.polynomial.hermite_e import HermiteE
from scipy import integrate, optimize, stats
from scipy.interpolate import PchipInterpolator

from density import sample_target
from errors import DomainError, ExtrapolationError, InvalidInputError
from flow import FlowConfig, gaussian_draws, inverse_points, map_points, pushforward_samples
from logger_config import get_logger, run_logger
from moments import default_quadrature
from numerics_utils import Stream, low_discrepancy_points, stream_rng, unit_sphere
from velocity import VelocityMode, default_mode, log_marginal, score, velocity_field

logger = get_logger('heatflow.diagnostics')

KS_C_1PCT = 1.628
MIN_KS_SAMPLES = 100
CDF_PANELS = 400
CDF_BOX = 10.0
MAX_CDF_BOX = 160.0
COVERAGE = 1e-9


# ---------------------------------------------------------------------------
# 1D monotone-rearrangement oracle
# ---------------------------------------------------------------------------

def _log_density_1d(density):
    def log_p(y):
        y = np.asarray(y, dtype=float)
        return density.log_r(y.reshape(-1, 1)).reshape(y.shape) - 0.5 * y * y
    return log_p


class QuantileOracle1D:
    """Normalised CDF table of a 1D target and its quantile function"""

    def __init__(self, density, tol=1e-10, panels=CDF_PANELS):
        if density.dim != 1:
            raise InvalidInputError("the quantile oracle is one-dimensional")
        if tol > 1e-8:
            raise InvalidInputError(f"oracle tolerance must be at most 1e-8, got {tol}")
        self.density = density
        self.tol = float(tol)
        self._log_p = _log_density_1d(density)
        lower, upper, below, above = self._window(density, panels)

        edges = np.linspace(lower, upper, panels + 1)
        masses = np.array([self._panel_mass(a, b) for a, b in zip(edges[:-1], edges[1:])])
        cumulative = below + np.concatenate([[0.0], np.cumsum(masses)])
        self.total = float(cumulative[-1] + above)
        cdf = cumulative / self.total

        keep = np.concatenate([[True], np.diff(cdf) > 0.0])
        self.edges = edges[keep]
        self.cdf = cdf[keep]
        if self.cdf[0] > COVERAGE or 1.0 - self.cdf[-1] > COVERAGE:
            raise ExtrapolationError("CDF table does not cover the required mass range")
        self._inverse = PchipInterpolator(self.cdf, self.edges)

    def _window(self, density, panels):
        """Smallest box [-w, w], w = CDF_BOX * 2^j, whose tails each hold at most COVERAGE of the mass"""
        if density.is_ball:
            self._set_shift(-1.0, 1.0, panels)
            return -1.0, 1.0, 0.0, 0.0
        width = CDF_BOX
        while True:
            self._set_shift(-width, width, panels)
            below = self._tail_mass(-np.inf, -width)
            above = self._tail_mass(width, np.inf)
            inside, _ = integrate.quad(self._pdf, -width, width, epsabs=1e-14, epsrel=1e-10, limit=400)
            total = below + inside + above
            if max(below, above) <= COVERAGE * total:
                return -width, width, below, above
            if width >= MAX_CDF_BOX:
                raise ExtrapolationError(
                    f"target keeps {max(below, above) / total:.2e} of its mass beyond |y| = {width:g}; "
                    f"the CDF table cannot cover [{COVERAGE:g}, 1 - {COVERAGE:g}]"
                )
            logger.info(f"quantile oracle: tail mass {max(below, above) / total:.2e} beyond {width:g}, widening")
            width *= 2.0

    def _set_shift(self, lower, upper, panels):
        grid = np.linspace(lower, upper, 20 * panels + 1)
        self._shift = float(np.max(self._log_p(grid[1:-1])))

    def _tail_mass(self, a, b):
        value, _ = integrate.quad(self._pdf, a, b, epsabs=1e-16, epsrel=1e-10, limit=200)
        return value

    def _pdf(self, y):
        return float(np.exp(self._log_p(np.array([y]))[0] - self._shift))

    def _panel_mass(self, a, b):
        value, _ = integrate.quad(self._pdf, a, b, epsabs=1e-14, epsrel=1e-12, limit=200)
        return value

    @property
    def cdf_grid(self):
        return np.column_stack([self.edges, self.cdf])

    def cdf_at(self, y):
        j = int(np.clip(np.searchsorted(self.edges, y, side='right') - 1, 0, len(self.edges) - 2))
        return self.cdf[j] + self._panel_mass(self.edges[j], y) / self.total

    def quantile(self, q):
        if not self.cdf[0] < q < self.cdf[-1]:
            raise ExtrapolationError(f"probability {q:.3e} is outside the covered mass range")
        j = int(np.searchsorted(self.cdf, q) - 1)
        a, b = self.edges[j], self.edges[j + 1]
        guess = float(np.clip(self._inverse(q), a, b))
        if abs(self.cdf_at(guess) - q) <= self.tol:
            return guess
        return optimize.brentq(lambda y: self.cdf_at(y) - q, a, b, xtol=1e-13, rtol=4 * np.finfo(float).eps)


def quantile_map(oracle, x):
    """F_p^{-1}(Phi(x))"""
    x = float(x)
    return oracle.quantile(float(stats.norm.cdf(x)))


# ---------------------------------------------------------------------------
# Two-sample statistics
# ---------------------------------------------------------------------------

class KsResult(NamedTuple):
    statistic: float
    critical_1pct: float

    @property
    def passed(self):
        return self.statistic < self.critical_1pct


def ks_two_sample(a, b):
    """Two-sample Kolmogorov-Smirnov statistic with its asymptotic 1% critical value"""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise DomainError("two-sample test needs non-empty samples")
    if a.size < MIN_KS_SAMPLES or b.size < MIN_KS_SAMPLES:
        raise DomainError(f"two-sample test needs at least {MIN_KS_SAMPLES} points per sample")
    statistic = stats.ks_2samp(a, b).statistic
    n, m = a.size, b.size
    return KsResult(statistic=float(statistic), critical_1pct=KS_C_1PCT * math.sqrt((n + m) / (n * m)))


def sliced_wasserstein(a, b, n_proj=64, seed=0):
    """Mean 1D Wasserstein-1 distance over random projections"""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    if a.shape[1] != b.shape[1]:
        raise DomainError(f"sample dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    d = a.shape[1]
    if d == 1:
        return float(stats.wasserstein_distance(a[:, 0], b[:, 0]))
    directions = unit_sphere(stream_rng(seed, Stream.PROJECTIONS, n_proj, d), n_proj, d)
    distances = [stats.wasserstein_distance(a @ w, b @ w) for w in directions]
    return float(np.mean(distances))


# ---------------------------------------------------------------------------
# Law of the flow at intermediate times
# ---------------------------------------------------------------------------

@dataclass
class MarginalCheck:
    t: float
    components: List[tuple]        # (component, statistic, critical_1pct, passed)

    @property
    def passed(self):
        return all(c[3] for c in self.components)

    @property
    def worst_ratio(self):
        return max(c[1] / c[2] for c in self.components)


def interpolated_reference(density, t, n, seed):
    """Samples of t X + sqrt(1 - t^2) Y with X ~ p and Y ~ gamma_d"""
    target = sample_target(density, n, seed).points
    noise = gaussian_draws(n, density.dim, seed, tag=Stream.REFERENCE)
    return t * target + np.sqrt(1.0 - t * t) * noise


def marginal_law_check(density, t, n, seed, cfg=None, quad=None, threads=1):
    """KS comparison of the flow at time t against the interpolated reference law"""
    t = float(t)
    if not 0.0 < t < 1.0:
        raise DomainError(f"marginal check needs t strictly inside (0, 1), got {t}")
    cloud = pushforward_samples(density, n, t, seed, cfg, quad, threads).points
    reference = interpolated_reference(density, t, n, seed)

    components = []
    for i in range(density.dim):
        result = ks_two_sample(cloud[:, i], reference[:, i])
        components.append((f"x{i + 1}", result.statistic, result.critical_1pct, result.passed))
    if density.dim > 1:
        w = unit_sphere(stream_rng(seed, Stream.PROJECTIONS, 1, density.dim), 1, density.dim)[0]
        result = ks_two_sample(cloud @ w, reference @ w)
        components.append(('projection', result.statistic, result.critical_1pct, result.passed))
    check = MarginalCheck(t=t, components=components)
    logger.info(f"marginal law at t={t}: worst KS/critical = {check.worst_ratio:.3f}")
    return check


# ---------------------------------------------------------------------------
# Log-Sobolev type ratio
# ---------------------------------------------------------------------------

@dataclass
class HermiteTanhFunction:
    """f(x) = c + P(x) e^{-x^2/4} + sum_m b_m tanh((x - a_m) / w_m), P a HermiteE series.

    With damped=False the polynomial part is P(x) itself.
    """
    hermite_coeffs: Sequence[float] = ()
    tanh_terms: Sequence[tuple] = ()       # (b, a, w)
    constant: float = 0.0
    damped: bool = True

    def __post_init__(self):
        self._p = HermiteE(list(self.hermite_coeffs) or [0.0])
        self._dp = self._p.deriv()
        self._ddp = self._dp.deriv()

    def _tanh_parts(self, x):
        value = np.zeros_like(x)
        first = np.zeros_like(x)
        second = np.zeros_like(x)
        for b, a, w in self.tanh_terms:
            th = np.tanh((x - a) / w)
            sech2 = 1.0 - th * th
            value += b * th
            first += b / w * sech2
            second += -2.0 * b / (w * w) * th * sech2
        return value, first, second

    def derivatives(self, x):
        """f, f', f'' at x"""
        x = np.asarray(x, dtype=float)
        p, dp, ddp = self._p(x), self._dp(x), self._ddp(x)
        if self.damped:
            e = np.exp(-0.25 * x * x)
            f = p * e
            f1 = (dp - 0.5 * x * p) * e
            f2 = (ddp - x * dp + (0.25 * x * x - 0.5) * p) * e
        else:
            f, f1, f2 = p, dp, ddp
        tv, t1, t2 = self._tanh_parts(x)
        return self.constant + f + tv, f1 + t1, f2 + t2

    def __call__(self, x):
        return self.derivatives(x)[0]


def log_sobolev_family(n, seed=0):
    """n random test functions; member i depends only on (seed, i)"""
    family = []
    for i in range(n):
        rng = stream_rng(seed, Stream.TEST_FUNCTIONS, i)
        coeffs = rng.standard_normal(6) / np.sqrt([math.factorial(j) for j in range(6)])
        bumps = [(float(rng.standard_normal()), float(rng.uniform(-2.0, 2.0)), float(rng.uniform(0.2, 1.0)))
                 for _ in range(2)]
        family.append(HermiteTanhFunction(coeffs.tolist(), bumps, constant=float(rng.standard_normal())))
    return family


class LogSobolevResult(NamedTuple):
    lhs: float
    rhs: float
    ratio: float
    constant_function: bool


def _mu_weight(density):
    log_p = _log_density_1d(density)
    grid = np.linspace(-CDF_BOX, CDF_BOX, 4001)
    shift = float(np.max(log_p(grid)))
    return lambda x: float(np.exp(log_p(np.array([x]))[0] - shift))


def _mu_integral(weight, g):
    value, _ = integrate.quad(lambda x: g(x) * weight(x), -CDF_BOX, CDF_BOX,
                              epsabs=1e-13, epsrel=1e-10, limit=400)
    return value


def log_sobolev_check(density, k, f):
    """int f^2 |log|f||^k dmu against sum_{j<=k} ||f^(j)||^2, f normalised in L2(mu)"""
    if density.dim != 1 or density.is_ball:
        raise InvalidInputError("log-Sobolev check needs a one-dimensional Gaussian perturbation")
    if k not in (1, 2):
        raise InvalidInputError(f"log-Sobolev order must be 1 or 2, got {k}")
    weight = _mu_weight(density)
    mass = _mu_integral(weight, lambda x: 1.0)
    norm2 = _mu_integral(weight, lambda x: float(f.derivatives(x)[0]) ** 2) / mass
    if norm2 <= 0.0:
        raise DomainError("test function vanishes in L2(mu)")
    scale = 1.0 / math.sqrt(norm2)

    def lhs_integrand(x):
        value = abs(float(f.derivatives(x)[0])) * scale
        if value == 0.0:
            return 0.0
        return value * value * abs(math.log(value)) ** k

    def rhs_integrand(x):
        derivs = f.derivatives(x)
        return sum((float(derivs[j]) * scale) ** 2 for j in range(k + 1))

    lhs = _mu_integral(weight, lhs_integrand) / mass
    rhs = _mu_integral(weight, rhs_integrand) / mass
    if rhs == 0.0:
        return LogSobolevResult(lhs=lhs, rhs=rhs, ratio=0.0, constant_function=True)
    constant = all(abs(float(f.derivatives(x)[1])) < 1e-14 for x in (-1.0, 0.0, 0.7))
    return LogSobolevResult(lhs=lhs, rhs=rhs, ratio=lhs / rhs, constant_function=constant)


class LogSobolevCap(NamedTuple):
    cap: float
    ratios: List[float]


def log_sobolev_cap(density, k, family):
    ratios = [log_sobolev_check(density, k, f).ratio for f in family]
    return LogSobolevCap(cap=float(max(ratios)), ratios=ratios)


# ---------------------------------------------------------------------------
# Verification battery
# ---------------------------------------------------------------------------

@dataclass
class CheckRecord:
    name: str
    statistic: float
    threshold: float
    passed: bool

    def to_dict(self):
        record = asdict(self)
        record['pass'] = bool(record.pop('passed'))
        return record


@dataclass
class VerificationSettings:
    seed: int = 0
    agreement_points: int = 100
    agreement_tol: float = 1e-6
    symmetry_tol: float = 1e-6
    psd_tol: float = 1e-10
    grid_points: int = 61
    oracle_tol: float = 1e-3
    anchors: int = 50
    round_trip_tol: float = 1e-5
    jacobian_tol: float = 1e-3
    fd_step: float = 1e-4
    score_taus: Sequence[float] = (0.1, 0.5, 1.0)
    score_points: int = 5
    score_tol: float = 1e-4
    marginal_times: Sequence[float] = (0.3, 0.6, 0.9)
    marginal_samples: int = 10000
    confinement_samples: int = 10000
    margin_grid_points: int = 7
    log_sobolev_size: int = 20
    log_sobolev_orders: Sequence[int] = (1, 2)
    log_sobolev_stability_tol: float = 0.1
    checks: Optional[Sequence[str]] = None


def _record(records, name, statistic, threshold, passed):
    record = CheckRecord(name=name, statistic=float(statistic), threshold=float(threshold), passed=bool(passed))
    records.append(record)
    run_logger.log_check(record.name, record.statistic, record.threshold, record.passed)
    return record


def _anchor_set(density, n, seed, radius=2.0):
    return low_discrepancy_points(n, density.dim, -radius, radius, seed=seed)


def _random_times(n, seed, upper):
    return stream_rng(seed, Stream.HOLDER_PAIRS, n, 0).uniform(0.0, upper, n)


def check_estimator_agreement(density, quad, settings, records):
    x = _anchor_set(density, settings.agreement_points, settings.seed)
    t = _random_times(settings.agreement_points, settings.seed, 1.0 - 1e-6)
    moment = velocity_field(density, t, x, quad, mode=VelocityMode.MOMENT).v
    ibp = velocity_field(density, t, x, quad, mode=VelocityMode.IBP).v
    gap = np.linalg.norm(moment - ibp, axis=1) / np.maximum(np.linalg.norm(moment, axis=1), 1.0)
    _record(records, 'estimator_agreement', np.max(gap), settings.agreement_tol,
            np.max(gap) <= settings.agreement_tol)


def check_jacobian_structure(density, quad, settings, records):
    x = _anchor_set(density, settings.agreement_points, settings.seed + 1, radius=0.5 if density.is_ball else 2.0)
    t = _random_times(settings.agreement_points, settings.seed + 1, 0.999)
    d = density.dim
    asymmetry = 0.0
    for tb, xb in zip(t[:10], x[:10]):
        # central differences of V itself, scaled to the width of the tilted measure
        h = settings.fd_step * np.sqrt(1.0 - tb * tb)
        shifts = np.concatenate([np.eye(d), -np.eye(d)]) * h
        v = velocity_field(density, np.full(2 * d, tb), xb + shifts, quad, mode=VelocityMode.MOMENT).v
        fd = (v[:d] - v[d:]).T / (2.0 * h)
        asymmetry = max(asymmetry, float(np.max(np.abs(fd - fd.T)) / max(np.max(np.abs(fd)), 1.0)))
    _record(records, 'jacobian_symmetry', asymmetry, settings.symmetry_tol, asymmetry <= settings.symmetry_tol)

    field_values = velocity_field(density, t, x, quad, mode=VelocityMode.MOMENT, with_jacobian=True)
    shifted = field_values.jac + (t / (1.0 - t * t))[:, None, None] * np.eye(density.dim)
    lowest = float(np.min(np.linalg.eigvalsh(shifted)[:, 0]))
    _record(records, 'psd_shift', -lowest, settings.psd_tol, lowest >= -settings.psd_tol)


def check_quantile_oracle(density, quad, cfg, settings, records, threads):
    grid = np.linspace(-3.0, 3.0, settings.grid_points)
    mapped = map_points(density, grid[:, None], cfg, quad, threads).raise_for_failures()
    oracle = QuantileOracle1D(density)
    expected = np.array([quantile_map(oracle, x) for x in grid])
    gap = float(np.max(np.abs(mapped.x_final[:, 0] - expected)))
    _record(records, 'quantile_oracle', gap, settings.oracle_tol, gap <= settings.oracle_tol)
    increments = np.diff(mapped.x_final[:, 0])
    _record(records, 'monotonicity', np.min(increments), 0.0, np.all(increments > 0.0))


def check_round_trip(density, quad, cfg, settings, records, threads):
    x = _anchor_set(density, settings.anchors, settings.seed + 2)
    forward = map_points(density, x, cfg, quad, threads).raise_for_failures()
    back = inverse_points(density, forward.x_final, cfg, quad, threads)
    gap = float(np.max(np.linalg.norm(back - x, axis=1)))
    _record(records, 'round_trip', gap, settings.round_trip_tol, gap <= settings.round_trip_tol)


def check_jacobian_fd(density, quad, cfg, settings, records, threads):
    d = density.dim
    h = settings.fd_step
    x = _anchor_set(density, settings.anchors, settings.seed + 3)
    propagated = map_points(density, x, replace(cfg, with_jacobian=True), quad, threads).raise_for_failures()
    shifts = np.concatenate([np.eye(d), -np.eye(d)]) * h
    stencil = (x[:, None, :] + shifts[None, :, :]).reshape(-1, d)
    images = map_points(density, stencil, replace(cfg, with_jacobian=False), quad, threads).raise_for_failures()
    images = images.x_final.reshape(len(x), 2 * d, d)
    fd = np.swapaxes((images[:, :d, :] - images[:, d:, :]) / (2.0 * h), 1, 2)
    error = np.linalg.norm(fd - propagated.jacobian, axis=(1, 2)) / np.linalg.norm(propagated.jacobian, axis=(1, 2))
    _record(records, 'jacobian_fd', np.max(error), settings.jacobian_tol, np.max(error) <= settings.jacobian_tol)

    growth = np.exp(propagated.log_growth_bound) * 1.05
    top = np.linalg.norm(propagated.jacobian, ord=2, axis=(1, 2))
    _record(records, 'lipschitz_growth', np.max(top / growth), 1.0, np.all(top <= growth))


def check_score(density, quad, settings, records):
    d = density.dim
    h = settings.fd_step
    x = _anchor_set(density, settings.score_points, settings.seed + 4, radius=0.5 if density.is_ball else 2.0)
    worst = 0.0
    for tau in settings.score_taus:
        u = float(np.exp(-tau))
        for xb in x:
            s = score(density, tau, xb, quad, mode=VelocityMode.MOMENT)
            plus = np.array([log_marginal(density, u, xb + h * e, quad) for e in np.eye(d)])
            minus = np.array([log_marginal(density, u, xb - h * e, quad) for e in np.eye(d)])
            fd = (plus - minus) / (2.0 * h)
            worst = max(worst, float(np.linalg.norm(s - fd) / max(np.linalg.norm(s), 1.0)))
    _record(records, 'score_fd', worst, settings.score_tol, worst <= settings.score_tol)


def check_marginals(density, quad, cfg, settings, records, threads):
    for t in settings.marginal_times:
        check = marginal_law_check(density, t, settings.marginal_samples, settings.seed, cfg, quad, threads)
        _record(records, f'marginal_law_t{t:g}', check.worst_ratio, 1.0, check.passed)


def check_confinement(density, quad, cfg, settings, records, threads):
    cloud = pushforward_samples(density, settings.confinement_samples, 1.0, settings.seed, cfg, quad, threads)
    largest = float(np.max(np.linalg.norm(cloud.points, axis=1))) if len(cloud.points) else np.inf
    passed = largest < 1.0 and cloud.failed_indices.size == 0
    _record(records, 'ball_confinement', largest, 1.0, passed)

    axis = np.linspace(-3.0, 3.0, settings.margin_grid_points)
    grid = np.stack(np.meshgrid(*[axis] * density.dim, indexing='ij'), axis=-1).reshape(-1, density.dim)
    images = map_points(density, grid, cfg, quad, threads).raise_for_failures().x_final
    margin = 1.0 - float(np.max(np.linalg.norm(images, axis=1)))
    _record(records, 'ball_margin', margin, 0.0, margin > 0.0)


def check_log_sobolev(density, settings, records):
    base = log_sobolev_family(settings.log_sobolev_size, settings.seed)
    doubled = base + log_sobolev_family(2 * settings.log_sobolev_size, settings.seed)[settings.log_sobolev_size:]
    for k in settings.log_sobolev_orders:
        cap = log_sobolev_cap(density, k, base).cap
        wider = log_sobolev_cap(density, k, doubled).cap
        _record(records, f'log_sobolev_cap_k{k}', cap, np.inf, np.isfinite(cap))
        drift = abs(wider / cap - 1.0) if cap > 0 else 0.0
        _record(records, f'log_sobolev_stability_k{k}', drift, settings.log_sobolev_stability_tol,
                drift <= settings.log_sobolev_stability_tol)


def run_verification(density, quad=None, cfg=None, settings=None, threads=1):
    """Run every check that applies to the density; returns CheckRecords in a fixed order"""
    quad = quad or default_quadrature(density.dim)
    cfg = cfg or FlowConfig()
    settings = settings or VerificationSettings()
    wanted = set(settings.checks) if settings.checks else None
    records = []

    def enabled(name):
        return wanted is None or name in wanted

    one_dim_perturbation = density.dim == 1 and not density.is_ball
    if enabled('estimator_agreement') and default_mode(density) == VelocityMode.IBP:
        check_estimator_agreement(density, quad, settings, records)
    if enabled('jacobian_structure'):
        check_jacobian_structure(density, quad, settings, records)
    if enabled('quantile_oracle') and one_dim_perturbation:
        check_quantile_oracle(density, quad, cfg, settings, records, threads)
    if enabled('round_trip'):
        check_round_trip(density, quad, cfg, settings, records, threads)
    if enabled('jacobian_fd'):
        check_jacobian_fd(density, quad, cfg, settings, records, threads)
    if enabled('score_fd'):
        check_score(density, quad, settings, records)
    if enabled('marginal_law'):
        check_marginals(density, quad, cfg, settings, records, threads)
    if enabled('ball_confinement') and density.is_ball:
        check_confinement(density, quad, cfg, settings, records, threads)
    if enabled('log_sobolev') and one_dim_perturbation:
        check_log_sobolev(density, settings, records)

    failed = [r.name for r in records if not r.passed]
    if failed:
        logger.warning(f"verification of {density.describe()}: {len(failed)} failed check(s): {failed}")
    else:
        logger.info(f"verification of {density.describe()}: all {len(records)} checks passed")
    return records
