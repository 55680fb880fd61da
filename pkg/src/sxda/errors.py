"""Error taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigurationError -> 2, DataError -> 3,
NumericError -> 4.
"""


class SxdaError(Exception):
    """Base class for all package errors."""


class DimensionError(SxdaError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigurationError(SxdaError):
    """A configuration value violates its constraints."""


class ContractError(SxdaError):
    """An operation was called outside its contract (wrong kind, non-scalar loss, ...)."""


class DataError(SxdaError):
    """On-disk data is missing or malformed."""


class NumericError(SxdaError):
    """A non-finite value appeared where finite values are required."""
