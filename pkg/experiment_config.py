"""
Sectioned key-value experiment files.

    [experiment]   kind, seed, output_dir and per-experiment settings
    [density]      target description (see density.density_from_mapping)
    [quadrature]   method, order, samples, antithetic, seed
    [flow]         integrator settings (see flow.FlowConfig)

Unknown sections and keys are rejected with their line and column. Lists
are comma-separated. Every run writes the fully resolved file back.
"""

import configparser
import re
from dataclasses import dataclass, field
from enum import Enum

from config import Config
from density import DENSITY_KEYS, FAMILY_KEYS, FamilyVariant, density_from_mapping, density_to_mapping
from diagnostics import VerificationSettings
from errors import ConfigError, HeatFlowError
from flow import FlowConfig, TimeParametrization
from logger_config import get_logger
from moments import QuadratureMethod, QuadratureSpec, default_quadrature

logger = get_logger('heatflow.cli')


class ExperimentKind(str, Enum):
    TRANSPORT = 'transport'
    MAP_GRID = 'map-grid'
    REGULARITY = 'regularity'
    VERIFY = 'verify'
    SCORE_TABLE = 'score-table'
    MARGINAL_CHECK = 'marginal-check'
    EXPONENT_SWEEP = 'exponent-sweep'


# value kinds
INT, FLOAT, BOOL, STR, FLOATS, STRS = 'int', 'float', 'bool', 'str', 'floats', 'strs'

EXPERIMENT_SCHEMA = {
    'kind': (STR, None),
    'seed': (INT, Config.DEFAULT_SEED),
    'output_dir': (STR, Config.OUTPUT_DIR),
    'n': (INT, 1000),
    'grid_min': (FLOAT, -3.0),
    'grid_max': (FLOAT, 3.0),
    'grid_points': (INT, 61),
    'k': (INT, 1),
    'pair_count': (INT, 32),
    'scales': (FLOATS, [1e-1, 3e-2, 1e-2, 3e-3, 1e-3]),
    'region': (FLOAT, 2.0),
    'fd_step': (FLOAT, 1e-3),
    'radii': (FLOATS, None),
    'alpha': (FLOAT, None),
    'taus': (FLOATS, [0.1, 0.5, 1.0]),
    'times': (FLOATS, [0.3, 0.6, 0.9]),
    'one_minus_t2': (FLOATS, [1e-6, 1e-5, 1e-4, 1e-3, 1e-2]),
    'quantity': (STR, 'norm'),
    'band_low': (FLOAT, None),
    'band_high': (FLOAT, None),
    'sweep_points': (INT, 256),
    'checks': (STRS, None),
    'agreement_points': (INT, 100),
    'anchors': (INT, 50),
    'score_points': (INT, 5),
    'marginal_samples': (INT, 10000),
    'confinement_samples': (INT, 10000),
    'log_sobolev_size': (INT, 20),
}

QUADRATURE_SCHEMA = {
    'method': (STR, 'auto'),
    'order': (INT, Config.GH_ORDER),
    'samples': (INT, Config.IS_SAMPLES),
    'antithetic': (BOOL, True),
    'seed': (INT, 0),
}

FLOW_SCHEMA = {
    't_end': (FLOAT, Config.T_END),
    'rel_tol': (FLOAT, Config.REL_TOL),
    'abs_tol': (FLOAT, Config.ABS_TOL),
    'max_step_fraction': (FLOAT, Config.MAX_STEP_FRACTION),
    'with_jacobian': (BOOL, False),
    'time_parametrization': (STR, TimeParametrization.DIRECT.value),
    'bounding_radius': (FLOAT, Config.BOUNDING_RADIUS),
    'max_steps': (INT, Config.MAX_STEPS),
    'batch_size': (INT, Config.BATCH_SIZE),
    'mode': (STR, None),
}

SCHEMAS = {'experiment': EXPERIMENT_SCHEMA, 'quadrature': QUADRATURE_SCHEMA, 'flow': FLOW_SCHEMA}
SECTIONS = ('experiment', 'density', 'quadrature', 'flow')
LIST_DENSITY_KEYS = {'weights', 'means', 'variances'}
BOOLEAN_STATES = configparser.ConfigParser.BOOLEAN_STATES


def _locate(text):
    """(section, key) -> (line, column) of every assignment in the file text"""
    positions = {}
    section = None
    for number, line in enumerate(text.splitlines(), start=1):
        header = re.match(r'\s*\[([^\]]+)\]', line)
        if header:
            section = header.group(1).strip()
            positions[(section, None)] = (number, line.index('[') + 1)
            continue
        assignment = re.match(r'(\s*)([^=:#;\s][^=:]*?)\s*[=:]', line)
        if assignment and section is not None:
            positions[(section, assignment.group(2).strip())] = (number, len(assignment.group(1)) + 1)
    return positions


def _convert(raw, kind, section, key, positions):
    text = raw.strip()
    try:
        if kind == INT:
            return int(text)
        if kind == FLOAT:
            return float(text)
        if kind == BOOL:
            if text.lower() not in BOOLEAN_STATES:
                raise ValueError(f"not a boolean: {text!r}")
            return BOOLEAN_STATES[text.lower()]
        if kind == FLOATS:
            return [float(v) for v in text.split(',') if v.strip()]
        if kind == STRS:
            return [v.strip() for v in text.split(',') if v.strip()]
        return text
    except ValueError as e:
        raise ConfigError(f"[{section}] {key}: {e}", *positions.get((section, key), (None, None))) from e


def _density_value(raw, key):
    text = raw.strip()
    if key in LIST_DENSITY_KEYS or ',' in text:
        return [float(v) for v in text.split(',') if v.strip()]
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


@dataclass
class ExperimentConfig:
    kind: ExperimentKind
    seed: int
    output_dir: str
    density: dict
    quadrature: dict
    flow: dict
    experiment: dict = field(default_factory=dict)

    def build_density(self):
        return density_from_mapping(self.density)

    def build_quadrature(self, dim):
        block = self.quadrature
        method = block['method']
        if method == 'auto':
            base = default_quadrature(dim)
            method = base.method.value
        if QuadratureMethod(method) == QuadratureMethod.GAUSS_HERMITE:
            return QuadratureSpec.gauss_hermite(dim=dim, order=block['order'])
        return QuadratureSpec.importance(dim=dim, samples=block['samples'], seed=block['seed'],
                                         antithetic=block['antithetic'])

    def build_flow_config(self):
        return FlowConfig(**self.flow)

    def verification_settings(self):
        e = self.experiment
        return VerificationSettings(
            seed=self.seed, agreement_points=e['agreement_points'], grid_points=e['grid_points'],
            anchors=e['anchors'], score_taus=tuple(e['taus']), score_points=e['score_points'],
            marginal_times=tuple(e['times']), marginal_samples=e['marginal_samples'],
            confinement_samples=e['confinement_samples'], log_sobolev_size=e['log_sobolev_size'],
            checks=e['checks'],
        )

    def to_parser(self):
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        experiment = dict(self.experiment, kind=self.kind.value, seed=self.seed, output_dir=self.output_dir)
        density = density_to_mapping(self.build_density())
        for name, block in (('experiment', experiment), ('density', density),
                            ('quadrature', self.quadrature), ('flow', self.flow)):
            parser.add_section(name)
            for key in sorted(block):
                value = block[key]
                if value is None:
                    continue
                if isinstance(value, (list, tuple)):
                    value = ', '.join(repr(v) if isinstance(v, float) else str(v) for v in value)
                elif isinstance(value, float):
                    value = repr(value)
                elif isinstance(value, Enum):
                    value = value.value
                parser.set(name, key, str(value))
        return parser

    def write_resolved(self, path):
        with open(path, 'w', encoding='utf-8') as handle:
            self.to_parser().write(handle)
        return path


def _apply_overrides(parser, overrides):
    for item in overrides or []:
        if '=' not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        target, value = item.split('=', 1)
        if '.' not in target:
            raise ConfigError(f"override {item!r} must name a section: section.key=value")
        section, key = (part.strip() for part in target.split('.', 1))
        if section not in SECTIONS:
            raise ConfigError(f"override {item!r} names unknown section [{section}]")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, value.strip())


def _typed_block(parser, section, schema, positions):
    block = {}
    present = dict(parser.items(section)) if parser.has_section(section) else {}
    for key in present:
        if key not in schema:
            raise ConfigError(f"unknown key '{key}' in [{section}]", *positions.get((section, key), (None, None)))
    for key, (kind, default) in schema.items():
        block[key] = _convert(present[key], kind, section, key, positions) if key in present else default
    return block


def _density_block(parser, positions):
    if not parser.has_section('density'):
        return {'kind': 'gaussian_perturbation', 'family': 'zero', 'dim': 1}
    raw = dict(parser.items('density'))
    try:
        variant = FamilyVariant(raw.get('family', FamilyVariant.ZERO.value).strip())
    except ValueError as e:
        raise ConfigError(f"unknown density family: {e}", *positions.get(('density', 'family'), (None, None)))
    allowed = DENSITY_KEYS | FAMILY_KEYS.get(variant, set())
    block = {}
    for key, value in raw.items():
        if key not in allowed:
            raise ConfigError(f"unknown key '{key}' in [density] for family '{variant.value}'",
                              *positions.get(('density', key), (None, None)))
        block[key] = _density_value(value, key)
    return block


def parse_experiment_config(text, overrides=None, kind=None):
    """ExperimentConfig from file text, overrides and an optional subcommand kind"""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    positions = _locate(text)
    try:
        parser.read_string(text)
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError("key-value line before any [section] header", e.lineno, 1) from e
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as e:
        raise ConfigError(str(e).splitlines()[0], e.lineno, 1) from e
    except configparser.ParsingError as e:
        line = e.errors[0][0] if e.errors else None
        raise ConfigError(f"malformed line: {e.errors[0][1] if e.errors else ''}", line, 1) from e

    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]", *positions.get((section, None), (None, None)))
    _apply_overrides(parser, overrides)

    experiment = _typed_block(parser, 'experiment', EXPERIMENT_SCHEMA, positions)
    quadrature = _typed_block(parser, 'quadrature', QUADRATURE_SCHEMA, positions)
    flow = _typed_block(parser, 'flow', FLOW_SCHEMA, positions)
    density = _density_block(parser, positions)

    declared = experiment.pop('kind')
    if kind is not None and declared is not None and declared != kind:
        raise ConfigError(f"config declares kind '{declared}' but the '{kind}' subcommand was used",
                          *positions.get(('experiment', 'kind'), (None, None)))
    try:
        resolved_kind = ExperimentKind(kind or declared)
    except ValueError as e:
        raise ConfigError(f"unknown or missing experiment kind: {kind or declared!r}") from e
    if quadrature['method'] not in ('auto',) + tuple(m.value for m in QuadratureMethod):
        raise ConfigError(f"unknown quadrature method '{quadrature['method']}'",
                          *positions.get(('quadrature', 'method'), (None, None)))

    config = ExperimentConfig(kind=resolved_kind, seed=experiment.pop('seed'),
                              output_dir=experiment.pop('output_dir'), density=density,
                              quadrature=quadrature, flow=flow, experiment=experiment)
    # surface value errors (bad family parameters, t_end out of range) as configuration errors
    try:
        config.build_quadrature(config.build_density().dim)
        config.build_flow_config()
    except (HeatFlowError, ValueError) as e:
        raise ConfigError(str(e)) from e
    logger.debug(f"parsed {resolved_kind.value} experiment with density {density}")
    return config


def load_experiment_config(path, overrides=None, kind=None):
    try:
        with open(path, encoding='utf-8') as handle:
            text = handle.read()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    return parse_experiment_config(text, overrides, kind)
