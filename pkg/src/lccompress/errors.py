"""Exception hierarchy shared by every module.

The CLI maps each class to an exit status, so the split below mirrors the
status codes rather than the Python call site that raised.
"""


class LCError(Exception):
    """Base class for all errors raised by lccompress."""


class ConfigError(LCError, ValueError):
    """Bad configuration, shape mismatch or violated precondition."""


class NumericError(LCError, ArithmeticError):
    """Non-finite values or a monotonicity violation during optimization."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class SizeLimitError(ConfigError):
    """An exhaustive oracle was asked to solve an instance that is too large."""


class FormatError(LCError, OSError):
    """A file could not be parsed."""


class UnsupportedVersionError(FormatError):
    """A model/theta file declares a format version we cannot read."""
