"""
Exceptions raised by the lab.

Everything derives from ``LabError`` so the ``lab`` command can turn any
refusal of the lab into a config-error exit code in one place.
"""


class LabError(Exception):
    """Base class for errors raised by ridgeapp."""


class ConfigError(LabError):
    """An experiment configuration failed validation."""

    def __init__(self, message, errors=None):
        super().__init__(message)
        self.errors = errors or {}


class DomainError(LabError, ValueError):
    """A parameter lies outside the domain of the requested object."""


class DimensionMismatchError(LabError, ValueError):
    """Array shapes do not agree."""


class SizeCapError(LabError):
    """A requested allocation exceeds a configured cap."""


class CapExceededError(LabError):
    """An exact computation was requested beyond its supported size."""


class FactorizationError(LabError):
    """A matrix factorization did not converge."""


class InsufficientTrialsError(LabError):
    """A calibration was asked to fit constants from too few trials."""


class SingularSystemError(LabError, ArithmeticError):
    """A Newton direction system cannot be solved.

    Attributes:
        index (int | None): Offending observation when a Hessian weight vanished.
        condition (float | None): Condition estimate of the reduced system.
    """

    def __init__(self, message, index=None, condition=None):
        super().__init__(message)
        self.index = index
        self.condition = condition


class RegimeConditionError(LabError, ValueError):
    """The standing n/p assumption of a bound does not hold.

    Attributes:
        lhs (float): Left side, C_KX**2 times the smaller dimension.
        rhs (float): Right side, (1 - alpha)**2 times the larger dimension.
    """

    def __init__(self, regime, lhs, rhs):
        super().__init__(
            f'regime condition failed for {regime}: {lhs!r} is not below {rhs!r}'
        )
        self.regime = regime
        self.lhs = lhs
        self.rhs = rhs
