"""Exception types shared across the package."""


class DifoError(Exception):
    """Base class for all package errors."""


class InvalidInputError(DifoError, ValueError):
    pass


class ShapeError(DifoError, ValueError):
    pass


class DivergenceUndefinedError(DifoError, ValueError):
    """Raised when q has zero mass where p does not."""


class DataError(DifoError, ValueError):
    pass


class ConfigError(DifoError, ValueError):
    pass


class NumericalError(DifoError, RuntimeError):
    """A loss became non-finite during training.

    ``record`` carries whatever diagnostic state the caller had at the time.
    """

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record
