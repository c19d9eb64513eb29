"""Exception hierarchy shared across the package."""


class LmcatError(Exception):
    """Base class for all package errors."""


class ShapeError(LmcatError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(LmcatError, ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(LmcatError, ValueError):
    """Invalid configuration value or model/variant setup."""


class DataError(LmcatError, ValueError):
    """Dataset content cannot satisfy the requested operation."""


class ParseError(LmcatError, ValueError):
    """Malformed on-disk artifact.

    Attributes:
        position: byte offset in the offending file where parsing failed, if known.
    """

    def __init__(self, message, position=None):
        if position is not None:
            message = f"{message} (at byte {position})"
        super().__init__(message)
        self.position = position


class DivergenceError(LmcatError, RuntimeError):
    """Training produced a non-finite loss or gradient."""
