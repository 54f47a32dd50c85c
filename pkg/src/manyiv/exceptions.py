"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`ManyIVError`.
The three intermediate classes map onto the CLI exit codes (configuration: 2,
data: 3, numerical: 4).
"""


class ManyIVError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ManyIVError, ValueError):
    """Invalid configuration or argument combination."""


class DataError(ManyIVError, ValueError):
    """Input data violates a documented precondition."""


class NumericalError(ManyIVError, ArithmeticError):
    """A numerical routine failed (singularity, non-convergence)."""


class DomainError(DataError):
    """A transform was applied outside its mathematical domain."""


class InsufficientDataError(DataError):
    """Too few observations for the requested operation."""


class AlignmentError(DataError):
    """Series do not share a common date index."""


class DegenerateInstrumentError(DataError):
    """An instrument column has zero in-sample variance."""


class SingularityError(NumericalError):
    """A matrix that must be inverted is (numerically) singular.

    Attributes
    ----------
    condition_number : float or None
        Ratio of largest to smallest eigenvalue when available.
    """

    def __init__(self, message, condition_number=None):
        super().__init__(message)
        self.condition_number = condition_number


class ConvergenceError(NumericalError):
    """An iterative routine did not converge.

    Attributes
    ----------
    trace : list
        Diagnostic trace of the failed attempts.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class CalibrationError(NumericalError):
    """No stationary rational-expectations solution for a calibration."""
