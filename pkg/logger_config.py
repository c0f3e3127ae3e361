import logging
import os
from logging.handlers import RotatingFileHandler

from config import Config

APP_LOGGER = 'heatflow'
MODULES = ['density', 'moments', 'velocity', 'flow', 'regularity', 'diagnostics', 'cli']


def setup_logging(log_dir=None, console_level=None):
    """Setup logging configuration for the toolkit"""
    logs_dir = log_dir or Config.LOG_DIR
    os.makedirs(logs_dir, exist_ok=True)

    logger = logging.getLogger(APP_LOGGER)
    logger.setLevel(logging.DEBUG)

    # Clear existing handlers
    logger.handlers.clear()

    detailed_formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s'
    )
    simple_formatter = logging.Formatter(
        '%(asctime)s - %(levelname)s - %(message)s'
    )

    # File handler for all logs (rotating)
    file_handler = RotatingFileHandler(
        os.path.join(logs_dir, 'app.log'),
        maxBytes=10*1024*1024,  # 10MB
        backupCount=5,
        encoding='utf-8'
    )
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(detailed_formatter)

    # File handler for errors only
    error_handler = RotatingFileHandler(
        os.path.join(logs_dir, 'errors.log'),
        maxBytes=5*1024*1024,  # 5MB
        backupCount=3,
        encoding='utf-8'
    )
    error_handler.setLevel(logging.ERROR)
    error_handler.setFormatter(detailed_formatter)

    console_handler = logging.StreamHandler()
    console_handler.setLevel(console_level or Config.LOG_LEVEL)
    console_handler.setFormatter(simple_formatter)

    logger.addHandler(file_handler)
    logger.addHandler(error_handler)
    logger.addHandler(console_handler)

    setup_module_loggers(logs_dir)
    run_logger.attach(logs_dir)

    return logger


def setup_module_loggers(logs_dir):
    """Give every numerical module its own rotating log file"""
    for module in MODULES:
        module_logger = logging.getLogger(f'{APP_LOGGER}.{module}')
        module_logger.setLevel(logging.DEBUG)
        module_logger.handlers.clear()

        module_handler = RotatingFileHandler(
            os.path.join(logs_dir, f'{module}.log'),
            maxBytes=5*1024*1024,  # 5MB
            backupCount=2,
            encoding='utf-8'
        )
        module_handler.setLevel(logging.DEBUG)
        module_handler.setFormatter(logging.Formatter(
            '%(asctime)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s'
        ))
        module_logger.addHandler(module_handler)


def get_logger(module_name=APP_LOGGER):
    """Get logger for a specific module"""
    if module_name != APP_LOGGER and not module_name.startswith(f'{APP_LOGGER}.'):
        module_name = f'{APP_LOGGER}.{module_name}'
    return logging.getLogger(module_name)


class RunLogger:
    """One-line event records for experiment runs (runs.log)"""

    def __init__(self):
        self.logger = logging.getLogger(f'{APP_LOGGER}.runs')
        self.logger.setLevel(logging.INFO)
        self._handler = None

    def attach(self, logs_dir):
        if self._handler is not None:
            self.logger.removeHandler(self._handler)
            self._handler.close()
        self._handler = RotatingFileHandler(
            os.path.join(logs_dir, 'runs.log'),
            maxBytes=5*1024*1024,  # 5MB
            backupCount=3,
            encoding='utf-8'
        )
        self._handler.setLevel(logging.INFO)
        self._handler.setFormatter(logging.Formatter('%(asctime)s - RUN - %(message)s'))
        self.logger.addHandler(self._handler)

    def log_run_start(self, experiment, seed, details=None):
        message = f"Run start - Experiment: {experiment}, Seed: {seed}"
        if details:
            message += f" | Details: {details}"
        self.logger.info(message)

    def log_run_finish(self, experiment, exit_status, elapsed):
        self.logger.info(
            f"Run finish - Experiment: {experiment}, Exit: {exit_status}, Elapsed: {elapsed:.2f}s"
        )

    def log_check(self, name, statistic, threshold, passed):
        status = "PASS" if passed else "FAIL"
        self.logger.info(
            f"Check - Name: {name}, Statistic: {statistic:.6g}, Threshold: {threshold:.6g}, Status: {status}"
        )

    def log_artifact(self, path, rows=None):
        message = f"Artifact - Path: {path}"
        if rows is not None:
            message += f", Rows: {rows}"
        self.logger.info(message)

    def log_failure(self, experiment, error):
        self.logger.info(f"Numerical failure - Experiment: {experiment} | Error: {error}")


run_logger = RunLogger()
