"""Exception types shared across the package.

The CLI maps these onto exit codes: usage errors exit 1, ``DataError``
subtypes exit 2, ``NumericalError`` subtypes exit 3.
"""


class FfvdError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(FfvdError, ValueError):
    """An input array has the wrong shape or dimension."""


class DataError(FfvdError, ValueError):
    """Invalid or degenerate data (parsing, validation, splits)."""


class InitializationError(DataError):
    """Data too degenerate to initialize a model (e.g. zero variance)."""


class InsufficientSamplesError(DataError):
    """Fewer samples than a statistical procedure requires."""


class NumericalError(FfvdError):
    """A computation produced a non-finite or otherwise unusable result."""


class NotPositiveDefiniteError(NumericalError):
    """Matrix factorization failed even at the maximum jitter level."""

    def __init__(self, message, jitter=None):
        super().__init__(message)
        self.jitter = jitter


class WeightCollapseError(NumericalError):
    """All particle weights vanished at some time step."""

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t
