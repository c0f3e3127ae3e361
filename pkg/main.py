import argparse
import json
import os
import sys
import time
from datetime import datetime

import numpy as np
import pandas as pd

from config import Config
from diagnostics import CheckRecord, marginal_law_check, run_verification
from errors import ConfigError, HeatFlowError
from experiment_config import ExperimentKind, load_experiment_config
from flow import gaussian_draws, map_points
from logger_config import get_logger, run_logger, setup_logging
from numerics_utils import low_discrepancy_points
from regularity import MIN_FIT_POINTS, fit_scaling_exponent, holder_exponent, holder_scan, lipschitz_profile
from velocity import (gradient_scaling_sweep, positive_part_rows, score, score_eigmax_sweep,
                      score_jacobian_eigmax, sweep_points)

EXIT_OK = 0
EXIT_ASSERTION = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

SWEEP_QUANTITIES = ('norm', 'lambda_max', 'score_eigmax')
GRID_CAP = 100_000


def _coordinate_columns(prefix, dim):
    return [f'{prefix}_{i + 1}' for i in range(dim)]


class HeatFlowApp:
    def __init__(self, experiment, threads=None, output_dir=None):
        self.experiment = experiment
        self.threads = threads or Config.THREADS
        self.output_dir = output_dir or experiment.output_dir
        self.experiment.output_dir = self.output_dir
        self.density = experiment.build_density()
        self.quad = experiment.build_quadrature(self.density.dim)
        self.cfg = experiment.build_flow_config()
        self.settings = experiment.experiment
        self.records = []
        self.artifacts = []
        self.logger = get_logger('heatflow.cli')

    # ------------------------------------------------------------------
    # Artifacts
    # ------------------------------------------------------------------

    def _path(self, name):
        return os.path.join(self.output_dir, name)

    def write_csv(self, frame, name):
        path = self._path(name)
        frame.to_csv(path, index=False, lineterminator='\n')
        self.artifacts.append(path)
        run_logger.log_artifact(path, rows=len(frame))
        return path

    def write_report(self, passed):
        path = self._path('report.json')
        report = {
            'experiment': self.experiment.kind.value,
            'passed': bool(passed),
            'checks': [record.to_dict() for record in self.records],
        }
        with open(path, 'w', encoding='utf-8') as handle:
            json.dump(report, handle, indent=2)
            handle.write('\n')
        self.artifacts.append(path)
        run_logger.log_artifact(path, rows=len(self.records))
        return path

    def check(self, name, statistic, threshold, passed):
        record = CheckRecord(name=name, statistic=float(statistic), threshold=float(threshold), passed=bool(passed))
        self.records.append(record)
        run_logger.log_check(record.name, record.statistic, record.threshold, record.passed)
        return record

    # ------------------------------------------------------------------
    # Experiments
    # ------------------------------------------------------------------

    def _map_frame(self, x0, with_index):
        d = self.density.dim
        mapped = map_points(self.density, x0, self.cfg, self.quad, self.threads).raise_for_failures()
        frame = pd.DataFrame(np.hstack([x0, mapped.x_final]),
                             columns=_coordinate_columns('x0', d) + _coordinate_columns('xf', d))
        frame['tail_bound'] = mapped.tail_bound
        frame['steps'] = mapped.steps
        if with_index:
            frame.insert(0, 'index', np.arange(len(x0)))
        return frame, mapped

    def run_transport(self):
        n = self.settings['n']
        print(f"🚚 Transporting {n} Gaussian draws onto {self.density.describe()}")
        x0 = gaussian_draws(n, self.density.dim, self.experiment.seed)
        frame, mapped = self._map_frame(x0, with_index=True)
        self.write_csv(frame, 'transport.csv')
        print(f"📈 Largest tail bound: {np.max(mapped.tail_bound):.3e}, mean steps: {np.mean(mapped.steps):.1f}")

    def run_map_grid(self):
        d = self.density.dim
        points = self.settings['grid_points']
        if points ** d > GRID_CAP:
            raise ConfigError(f"map grid of {points}^{d} points exceeds {GRID_CAP}; lower [experiment] grid_points")
        axis = np.linspace(self.settings['grid_min'], self.settings['grid_max'], points)
        mesh = np.meshgrid(*([axis] * d), indexing='ij')
        x0 = np.column_stack([m.ravel() for m in mesh])
        print(f"🗺️  Evaluating the map on {len(x0)} grid points")
        frame, _ = self._map_frame(x0, with_index=False)
        self.write_csv(frame, 'map_grid.csv')

    def run_regularity(self):
        s = self.settings
        print(f"🔬 Hoelder scan of order {s['k']} over {len(s['scales'])} scales")
        report = holder_scan(self.density, s['k'], s['pair_count'], s['scales'], region=s['region'],
                             seed=self.experiment.seed, cfg=self.cfg, quad=self.quad, alpha=s['alpha'],
                             fd_step=s['fd_step'], threads=self.threads)
        self.write_csv(report.quotient_table(), 'quotients.csv')
        fit = report.fitted_exponent
        rows = [] if fit is None else [{'slope': fit.slope, 'half_width': fit.half_width, 'n_scales': fit.n_scales}]
        self.write_csv(pd.DataFrame(rows, columns=['slope', 'half_width', 'n_scales']), 'fit.csv')
        print(f"📏 Lipschitz estimate: {report.lipschitz_est:.4g}")
        if fit is None:
            print("⚠️  Too few scales above the noise floor, exponent not resolved")
        else:
            print(f"📐 Fitted exponent: {fit.slope:.3f} ± {fit.half_width:.3f}")
            self._band_checks('holder_exponent', fit.slope, s['band_low'], s['band_high'])

        if s['radii']:
            profile = lipschitz_profile(self.density, s['radii'], s['pair_count'], seed=self.experiment.seed,
                                        cfg=self.cfg, quad=self.quad, threads=self.threads)
            self.write_csv(profile.table, 'lipschitz.csv')

    def run_verify(self):
        settings = self.experiment.verification_settings()
        print(f"🧪 Running verification battery on {self.density.describe()}")
        records = run_verification(self.density, self.quad, self.cfg, settings, self.threads)
        self.records.extend(records)
        for record in records:
            print(f"  {'✅' if record.passed else '❌'} {record.name}: {record.statistic:.3e} "
                  f"(threshold {record.threshold:.3e})")

    def run_score_table(self):
        d = self.density.dim
        radius = 0.5 if self.density.is_ball else 2.0
        points = low_discrepancy_points(self.settings['score_points'], d, -radius, radius, seed=self.experiment.seed)
        rows = []
        for tau in self.settings['taus']:
            for x in points:
                s = score(self.density, tau, x, self.quad, mode=self.cfg.mode)
                eigmax = score_jacobian_eigmax(self.density, tau, x, self.quad) if tau > 0 else np.nan
                rows.append([tau, *x, *s, eigmax])
        columns = ['tau'] + _coordinate_columns('x', d) + _coordinate_columns('s', d) + ['eigmax']
        self.write_csv(pd.DataFrame(rows, columns=columns), 'score_table.csv')
        print(f"🧭 Score evaluated at {len(rows)} (tau, x) pairs")

    def run_marginal_check(self):
        rows = []
        for t in self.settings['times']:
            check = marginal_law_check(self.density, t, self.settings['n'], self.experiment.seed,
                                       self.cfg, self.quad, self.threads)
            for component, statistic, critical, passed in check.components:
                rows.append({'t': t, 'component': component, 'statistic': statistic,
                             'critical_1pct': critical, 'passed': passed})
            self.check(f'marginal_law_t{t:g}', check.worst_ratio, 1.0, check.passed)
            print(f"  {'✅' if check.passed else '❌'} t={t:g}: worst KS/critical = {check.worst_ratio:.3f}")
        self.write_csv(pd.DataFrame(rows, columns=['t', 'component', 'statistic', 'critical_1pct', 'passed']),
                       'marginal.csv')

    def _band_checks(self, name, slope, low, high):
        if low is not None:
            self.check(f'{name}_lower', slope, low, slope >= low)
        if high is not None:
            self.check(f'{name}_upper', slope, high, slope <= high)

    def run_exponent_sweep(self):
        s = self.settings
        quantity = s['quantity']
        if quantity not in SWEEP_QUANTITIES:
            raise ConfigError(f"unknown sweep quantity '{quantity}', expected one of {SWEEP_QUANTITIES}")
        alpha = holder_exponent(self.density)
        predicted = alpha / 2.0 - 1.0
        low = predicted - 0.2 if s['band_low'] is None else s['band_low']
        # lambda_max bounds are one-sided
        high = s['band_high'] if s['band_high'] is not None else (predicted + 0.3 if quantity == 'norm' else None)
        points = sweep_points(self.density, s['sweep_points'], seed=self.experiment.seed)
        print(f"📉 Sweeping {quantity} over {len(points)} sweep points (predicted slope {predicted:.3f})")

        if quantity == 'score_eigmax':
            frame = score_eigmax_sweep(self.density, s['taus'], self.quad, points)
            self.write_csv(frame, 'score_sweep.csv')
            scale_column, value_column = 'tau', 'sup_eigmax'
        else:
            frame = gradient_scaling_sweep(self.density, s['one_minus_t2'], self.quad, points)
            self.write_csv(frame, 'sweep.csv')
            scale_column = 'one_minus_t2'
            value_column = 'sup_norm' if quantity == 'norm' else 'sup_lambda_max'

        usable = frame if quantity == 'norm' else positive_part_rows(frame, value_column)
        if quantity != 'norm' and len(usable) < MIN_FIT_POINTS:
            print(f"✅ Only {len(usable)} sweep row(s) with positive {value_column}: bound holds trivially")
            self.write_csv(pd.DataFrame([], columns=['slope', 'half_width', 'n_scales']), 'fit.csv')
            self.check('exponent_trivially_bounded', len(usable), MIN_FIT_POINTS, True)
            return
        fit = fit_scaling_exponent(zip(usable[scale_column], usable[value_column]))
        self.write_csv(pd.DataFrame([{'slope': fit.slope, 'half_width': fit.half_width, 'n_scales': fit.n_scales}],
                                    columns=['slope', 'half_width', 'n_scales']), 'fit.csv')
        print(f"📐 Fitted slope {fit.slope:.3f} ± {fit.half_width:.3f}, band [{low:.3f}, "
              f"{'inf' if high is None else f'{high:.3f}'}]")
        self._band_checks('exponent', fit.slope, low, high)

    # ------------------------------------------------------------------
    # Runner
    # ------------------------------------------------------------------

    def show_summary(self, passed, elapsed):
        print("\n📊 Run Summary:")
        print("=" * 50)
        print(f"🧮 Experiment: {self.experiment.kind.value}")
        print(f"🎯 Target: {self.density.describe()}")
        print(f"🎲 Seed: {self.experiment.seed}")
        print(f"🧵 Threads: {self.threads}")
        print(f"⏱️  Elapsed: {elapsed:.2f}s")
        print(f"📁 Artifacts: {len(self.artifacts)} file(s) in {self.output_dir}")
        if self.records:
            failed = [r.name for r in self.records if not r.passed]
            print(f"🔎 Checks: {len(self.records) - len(failed)}/{len(self.records)} passed")
            for name in failed:
                print(f"  • failed: {name}")
        print(f"{'✅ PASS' if passed else '❌ FAIL'}")
        print("=" * 50)

    def run(self):
        """Run the experiment, write every artifact and return the exit status"""
        runners = {
            ExperimentKind.TRANSPORT: self.run_transport,
            ExperimentKind.MAP_GRID: self.run_map_grid,
            ExperimentKind.REGULARITY: self.run_regularity,
            ExperimentKind.VERIFY: self.run_verify,
            ExperimentKind.SCORE_TABLE: self.run_score_table,
            ExperimentKind.MARGINAL_CHECK: self.run_marginal_check,
            ExperimentKind.EXPONENT_SWEEP: self.run_exponent_sweep,
        }
        kind = self.experiment.kind
        print(f"🚀 Starting {kind.value} experiment...")
        print("=" * 50)
        started = time.perf_counter()
        run_logger.log_run_start(kind.value, self.experiment.seed,
                                 f"density={self.density.describe()}, threads={self.threads}")
        self.logger.info(f"Starting {kind.value} experiment, output in {self.output_dir}")

        os.makedirs(self.output_dir, exist_ok=True)
        resolved = self.experiment.write_resolved(self._path('resolved-config.txt'))
        self.artifacts.append(resolved)
        run_logger.log_artifact(resolved)

        runners[kind]()
        passed = all(record.passed for record in self.records)
        self.write_report(passed)

        elapsed = time.perf_counter() - started
        status = EXIT_OK if passed else EXIT_ASSERTION
        run_logger.log_run_finish(kind.value, status, elapsed)
        self.logger.info(f"Finished {kind.value} experiment with exit status {status} in {elapsed:.2f}s")
        self.show_summary(passed, elapsed)
        return status


def build_parser():
    parser = argparse.ArgumentParser(
        prog='heatflow',
        description='Heat-flow transport maps: construction, integration and verification experiments',
    )
    subparsers = parser.add_subparsers(dest='command', required=True)
    for kind in ExperimentKind:
        sub = subparsers.add_parser(kind.value, help=f'run a {kind.value} experiment')
        sub.add_argument('--config', required=True, help='experiment configuration file')
        sub.add_argument('--set', dest='overrides', action='append', default=[], metavar='SECTION.KEY=VALUE',
                         help='override one configuration value (repeatable)')
        sub.add_argument('--threads', type=int, default=None, help='worker threads (default: HEATFLOW_THREADS)')
        sub.add_argument('--output', default=None, help='output directory (default: [experiment] output_dir)')
    return parser


def main(argv=None):
    """Main entry point"""
    args = build_parser().parse_args(argv)

    # Initialize logging system
    setup_logging()
    logger = get_logger('heatflow.cli')
    logger.info(f"heatflow {args.command} invoked at {datetime.now().isoformat(timespec='seconds')}")

    try:
        experiment = load_experiment_config(args.config, args.overrides, kind=args.command)
        app = HeatFlowApp(experiment, threads=args.threads, output_dir=args.output)
    except HeatFlowError as e:
        print(f"❌ Configuration error: {e}", file=sys.stderr)
        logger.error(f"Invalid configuration {args.config}: {e}")
        run_logger.log_failure(args.command, e)
        return EXIT_CONFIG

    try:
        return app.run()
    except ConfigError as e:
        print(f"❌ Configuration error: {e}", file=sys.stderr)
        logger.error(f"Invalid configuration {args.config}: {e}")
        run_logger.log_failure(args.command, e)
        return EXIT_CONFIG
    except HeatFlowError as e:
        print(f"❌ Numerical failure in {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        logger.error(f"{args.command} experiment failed: {e}", exc_info=True)
        run_logger.log_failure(args.command, f"{type(e).__name__}: {e}")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
