"""Exception types shared across the package."""


class TgmemError(Exception):
    """Base class for all library errors."""


class DimensionError(TgmemError):
    """Operand shapes are incompatible; message names the offending op."""


class ContractError(TgmemError):
    """A documented precondition was violated by the caller."""


class NumericError(TgmemError):
    """A computation produced non-finite values."""


class ParseError(TgmemError):
    """A dataset row could not be parsed; message names the line number."""


class OrderingError(TgmemError):
    """Event timestamps violate the non-decreasing stream order."""


class ConfigError(TgmemError):
    """Invalid configuration value or combination."""


class UndefinedMetricError(TgmemError):
    """Metric is undefined for the given inputs (e.g. single-class labels)."""
