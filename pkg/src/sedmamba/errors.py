"""Exception hierarchy shared by every module."""


class SedError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SedError, ValueError):
    """Operand shapes do not agree."""


class ConfigError(SedError, ValueError):
    """Invalid configuration or parameter choice."""


class NumericError(SedError, ArithmeticError):
    """A NaN or Inf was produced, or a domain restriction was violated."""


class GraphError(SedError, RuntimeError):
    """Misuse of the autodiff graph (non-scalar loss, double backward...)."""


class DataError(SedError, ValueError):
    """Malformed or unreadable input data."""


class UndefinedMetricError(SedError, ValueError):
    """A metric is not defined for the given labels (e.g. one class only)."""
