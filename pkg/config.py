import os
from dotenv import load_dotenv

load_dotenv()


def _env_float(name, default):
    value = os.getenv(name)
    return float(value) if value not in (None, '') else default


def _env_int(name, default):
    value = os.getenv(name)
    return int(value) if value not in (None, '') else default


class Config:
    # Logging
    LOG_DIR = os.getenv('HEATFLOW_LOG_DIR', 'logs')
    LOG_LEVEL = os.getenv('HEATFLOW_LOG_LEVEL', 'INFO').upper()

    # Runner settings
    THREADS = _env_int('HEATFLOW_THREADS', 1)
    OUTPUT_DIR = os.getenv('HEATFLOW_OUTPUT_DIR', 'runs')
    BATCH_SIZE = _env_int('HEATFLOW_BATCH_SIZE', 256)  # particles per integrator batch

    # Quadrature defaults
    GH_ORDER = _env_int('HEATFLOW_GH_ORDER', 48)
    IS_SAMPLES = _env_int('HEATFLOW_IS_SAMPLES', 20000)
    MAX_NODE_ELEMENTS = _env_int('HEATFLOW_MAX_NODE_ELEMENTS', 2_000_000)  # rows * nodes per chunk

    # Flow integration defaults
    T_END = _env_float('HEATFLOW_T_END', 1.0 - 1e-8)
    REL_TOL = _env_float('HEATFLOW_REL_TOL', 1e-8)
    ABS_TOL = _env_float('HEATFLOW_ABS_TOL', 1e-10)
    MAX_STEP_FRACTION = _env_float('HEATFLOW_MAX_STEP_FRACTION', 0.1)
    BOUNDING_RADIUS = _env_float('HEATFLOW_BOUNDING_RADIUS', 50.0)
    MAX_STEPS = _env_int('HEATFLOW_MAX_STEPS', 20000)

    # Weierstrass-Fourier defaults
    WEIERSTRASS_TERMS = 12
    WEIERSTRASS_BASE = 2.0

    # Seeds
    DEFAULT_SEED = _env_int('HEATFLOW_SEED', 20240601)
