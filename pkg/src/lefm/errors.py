"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: ConfigurationError -> 1 (usage),
DataError -> 2, NumericError -> 3.
"""


class LefmError(Exception):
    """Base class for package errors."""


class ConfigurationError(LefmError):
    """Invalid configuration: out-of-range sizes, bad rule names, bad flags."""


class DataError(LefmError):
    """Dataset problems: missing or unreadable files, inconsistent shapes."""


class NumericError(LefmError):
    """Non-finite values where finite ones are required, or divergence."""
