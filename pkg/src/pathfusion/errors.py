"""Exception hierarchy shared by every module.

The CLI maps these to exit codes: configuration/contract problems exit 1,
I/O and on-disk corruption exit 2.
"""


class PathFusionError(Exception):
    """Base class for all package errors."""


class ConfigError(PathFusionError, ValueError):
    """Invalid configuration value; the message names the offending field."""


class DomainError(PathFusionError, ValueError):
    """Input outside the mathematical domain of an operation."""


class ShapeError(PathFusionError, ValueError):
    """Incompatible tensor shapes."""


class NumericError(PathFusionError, ArithmeticError):
    """A computation produced NaN or infinity."""


class ContractError(PathFusionError, RuntimeError):
    """A call violated an API precondition (e.g. non-scalar loss)."""


class DataError(PathFusionError, ValueError):
    """Dataset content unsuitable for the request (e.g. empty split)."""


class FormatError(PathFusionError, OSError):
    """On-disk layout is missing files or has malformed headers."""


class CorruptionError(PathFusionError, OSError):
    """On-disk payload failed checksum or size validation."""
