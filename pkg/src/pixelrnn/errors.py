"""Exception hierarchy shared by every module."""


class PixelRNNError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(PixelRNNError, ValueError):
    """Bad shapes, invalid hyperparameters or misuse of an API."""


class NumericError(PixelRNNError, ArithmeticError):
    """A NaN or infinity showed up where finite values are required."""


class DataError(PixelRNNError, ValueError):
    """Input data is out of range or inconsistent."""


class FormatError(DataError):
    """A file could not be parsed.

    ``offset`` is the byte offset at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
