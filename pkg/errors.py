"""
Exception hierarchy for the heat-flow transport toolkit.

Every failure raised by the numerical modules derives from HeatFlowError so the
CLI can map it onto an exit status; input-type failures also derive from
ValueError.
"""


class HeatFlowError(Exception):
    """Base class for all toolkit errors"""


class InvalidInputError(HeatFlowError, ValueError):
    """Non-finite point, malformed parameters or an invalid configuration value"""


class CapabilityError(HeatFlowError):
    """The density does not expose the requested derivative"""


class OutsideSupportError(HeatFlowError, ValueError):
    """A ball-supported quantity was requested at a point with ||y|| >= 1"""


class EnvelopeError(HeatFlowError):
    """Rejection sampling envelope failed (acceptance too low or unbounded tilt)"""


class DegenerateMeasureError(HeatFlowError):
    """All weights of the tilted measure vanished"""


class DomainError(HeatFlowError, ValueError):
    """Argument outside the domain of an operation (t >= 1, tau = 0, ...)"""


class StiffnessError(HeatFlowError):
    """Step size underflow in the ODE integrator"""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class DivergenceError(HeatFlowError):
    """Non-finite state or a trajectory leaving the bounding box"""


class ExtrapolationError(HeatFlowError):
    """Quantile oracle queried outside its covered mass range"""


class InsufficientDataError(HeatFlowError):
    """Not enough usable scales or samples for a fit"""


class ConfigError(HeatFlowError):
    """Experiment configuration could not be parsed"""

    def __init__(self, message, line=None, column=None):
        location = ""
        if line is not None:
            location = f" (line {line}, column {column or 1})"
        super().__init__(f"{message}{location}")
        self.line = line
        self.column = column
