"""Exception types shared across the package.

Errors fall into two families: bad inputs or configuration (DataFormatError,
ConfigError) and numerical breakdown during optimization (NumericalError).
The command line maps the former to exit code 2 and the latter to exit code 1.
"""


class DataFormatError(ValueError):
    """Raised when an input file violates its schema."""


class ConfigError(ValueError):
    """Raised when a run configuration is malformed or inconsistent."""


class NumericalError(RuntimeError):
    """Raised when training or optimization produces non-finite values."""
