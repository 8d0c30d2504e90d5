"""Exception hierarchy shared across the package.

The three branches map onto the CLI exit codes: ConfigError -> 1,
DataError -> 2, NumericalError -> 3.
"""


class TempbalError(Exception):
    """Base class for all package errors."""


class ConfigError(TempbalError):
    """Bad usage: unknown flags, malformed config keys, invalid values."""


class DataError(TempbalError):
    """Malformed input data: snapshot files, CSV datasets."""


class NumericalError(TempbalError):
    """Numerical failure: degenerate spectra, divergence, non-convergence."""
