"""Exception hierarchy. Each class maps onto one CLI exit code."""


class EmbedEvalError(Exception):
    exit_code = 1


class ConfigError(EmbedEvalError, ValueError):
    """Invalid configuration or argument value."""

    exit_code = 2


class DataFormatError(EmbedEvalError, ValueError):
    """A file or array does not conform to the expected format."""

    exit_code = 3


class NumericError(EmbedEvalError, ArithmeticError):
    """A numerical routine could not produce a valid result."""

    exit_code = 4
