"""Exception hierarchy shared by every module."""


class MadCLIPError(Exception):
    """Base class for all library errors."""


class InputError(MadCLIPError, ValueError):
    """Malformed caller-supplied data (shapes, ranges, non-finite values)."""


class ConfigurationError(MadCLIPError, ValueError):
    """Inconsistent or unusable configuration."""


class ContractViolation(MadCLIPError):
    """A precondition that the caller promised was not met."""


class NumericError(MadCLIPError, FloatingPointError):
    """Non-finite values where finite ones are required."""


class UndefinedMetricError(MadCLIPError, ValueError):
    """Metric cannot be computed for the given labels (e.g. one class only)."""


class DataError(MadCLIPError):
    """Dataset manifest could not be loaded or validated."""


class DivergenceError(MadCLIPError):
    """Training produced a non-finite loss."""
