"""Exception types shared across the package."""


class LoralabError(Exception):
    """Base class for all package errors."""


class DimensionError(LoralabError, ValueError):
    """Operand shapes do not conform."""


class ArgumentError(LoralabError, ValueError):
    """Argument outside its documented domain."""


class NumericError(LoralabError, ArithmeticError):
    """Non-finite value encountered where finiteness is required."""


class FormatError(LoralabError, ValueError):
    """Malformed binary or text input file."""


class ConfigError(LoralabError, ValueError):
    """Invalid, unknown, or missing experiment configuration key."""
