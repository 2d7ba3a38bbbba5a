"""Exception hierarchy shared by the library and the command line front end."""


class SpinCountError(Exception):
    """Base class for every error raised by :mod:`spincount`."""

    exit_code = 1


class DomainError(SpinCountError, ValueError):
    """Invalid spin quantum numbers or model parameters."""

    exit_code = 2


class ConfigError(SpinCountError, ValueError):
    exit_code = 2


class IntegrationError(SpinCountError, RuntimeError):
    """Time integration failed or drifted beyond tolerance.

    ``time`` carries the simulation time at which the failure was detected.
    """

    exit_code = 3

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class StepSizeError(IntegrationError):
    """A fixed time step is too coarse for the current click rate."""

    def __init__(self, message, time=None, rate=None, dt=None):
        super().__init__(message, time=time)
        self.rate = rate
        self.dt = dt


class AmbiguityError(SpinCountError, RuntimeError):
    """The generator has more than one stationary state in the requested block."""

    exit_code = 4


class EigensolverError(SpinCountError, RuntimeError):
    exit_code = 4

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class EstimatorInputError(SpinCountError, ValueError):
    """Count record and ramp schedule (or metadata) do not match."""

    exit_code = 5
