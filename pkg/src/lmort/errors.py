"""Exception taxonomy shared by all modules.

The CLI maps these onto exit codes: ConfigError -> 1, DataError and
FormatError -> 2, NumericError -> 3.
"""


class LmortError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(LmortError):
    """Invalid configuration or usage."""


class DataError(LmortError):
    """Inputs violate a documented precondition or invariant."""


class FormatError(LmortError):
    """Malformed, truncated, or inconsistent on-disk data."""


class NumericError(LmortError):
    """Non-finite values or other numeric failures."""
