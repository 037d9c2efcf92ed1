"""Exception types shared across the package."""


class EitPhysError(Exception):
    """Base class for all package errors."""


class DimensionError(EitPhysError, ValueError):
    """Tensor shapes are incompatible for an operation."""


class UsageError(EitPhysError, RuntimeError):
    """An API was called in a state or with arguments it does not support."""


class NumericalError(EitPhysError, FloatingPointError):
    """A computation produced non-finite values."""


class ConfigError(EitPhysError, ValueError):
    """A configuration is inconsistent or physically invalid."""


class AlignmentError(EitPhysError, RuntimeError):
    """No admissible lag could be evaluated between two signals."""


class UnsupportedRateError(EitPhysError, ValueError):
    """A signal's sample rate is below what an operation supports."""
