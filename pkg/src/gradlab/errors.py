"""Exception taxonomy shared by every gradlab module."""


class GradlabError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(GradlabError, ValueError):
    """Operands have incompatible dimensions."""


class ConfigError(GradlabError, ValueError):
    """Invalid configuration value or experiment file.

    `line` is set when the error originates from a config file.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FactorizationError(GradlabError, ArithmeticError):
    """A matrix factorization failed. `pivot` names the failing pivot (1-based)."""

    def __init__(self, message, pivot=None):
        if pivot is not None:
            message = f"{message} (failing pivot {pivot})"
        super().__init__(message)
        self.pivot = pivot


class NumericError(GradlabError, ArithmeticError):
    """Non-finite values or a non-converging numeric routine."""


class StateError(GradlabError, RuntimeError):
    """Operation called with missing or mismatched cached state."""


class FormatError(GradlabError, ValueError):
    """Malformed external file. `byte_offset` locates the defect when known."""

    def __init__(self, message, byte_offset=None):
        if byte_offset is not None:
            message = f"{message} (at byte offset {byte_offset})"
        super().__init__(message)
        self.byte_offset = byte_offset


class InputError(GradlabError, ValueError):
    """Caller supplied empty or out-of-range input data."""
