"""Exception hierarchy shared across the package.

The CLI maps each family to a fixed exit status, so new error types should
subclass one of the four category bases rather than ``ScalpelError`` itself.
"""


class ScalpelError(Exception):
    """Base class for every error raised deliberately by this package."""

    category = "internal"
    exit_code = 5


class ConfigError(ScalpelError, ValueError):
    category = "config"
    exit_code = 2


class DataError(ScalpelError, ValueError):
    category = "data"
    exit_code = 3


class TrainingError(ScalpelError, RuntimeError):
    category = "training"
    exit_code = 4


class InvariantError(ScalpelError, RuntimeError):
    category = "invariant"
    exit_code = 5


class ShapeError(ConfigError):
    """Operand dimensions do not agree."""


class NumericError(InvariantError, ArithmeticError):
    """A non-finite value reached a computation that requires finite input."""


class ContractError(InvariantError):
    """An API precondition was violated by the caller."""


class InputError(DataError):
    """Bad user-supplied data: out-of-range ids, empty prompts, and so on."""


class DegenerateInputError(DataError):
    """Input on which the requested statistic is undefined."""


class FormatError(DataError):
    """File does not carry the expected magic bytes or version."""


class CorruptionError(DataError):
    """File structure is internally inconsistent or truncated."""


class ParseError(DataError):
    """A text record could not be parsed."""
