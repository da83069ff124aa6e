"""Exception types raised across the package."""


class LQError(Exception):
    """Base class for every error raised by jumplq."""


class DimensionMismatch(LQError, ValueError):
    pass


class NonFiniteCoefficient(LQError, ValueError):
    pass


class InvalidIntensity(LQError, ValueError):
    pass


class InvalidHorizon(LQError, ValueError):
    pass


class OutOfRange(LQError, ValueError):
    """A time argument falls outside the interval a provider covers."""


class ConfigError(LQError, ValueError):
    pass


class StructureViolation(LQError, ValueError):
    pass


class InvalidQ0(LQError, ValueError):
    pass


class UnknownExample(LQError, KeyError):
    pass


class StateBlowUp(LQError, ArithmeticError):
    """State or Riccati iterate exceeded the overflow guard."""

    def __init__(self, message, path_index=None, time=None):
        super().__init__(message)
        self.path_index = path_index
        self.time = time


class RiccatiBlowUp(LQError, ArithmeticError):
    """Smallest eigenvalue of the aggregated control weight fell to the floor."""

    def __init__(self, message, time=None, min_eig=None):
        super().__init__(message)
        self.time = time
        self.min_eig = min_eig
