"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericalError -> 3.
"""


class CortlocError(Exception):
    """Base class for all package errors."""


class ConfigError(CortlocError):
    """Invalid or inconsistent run configuration."""


class DataError(CortlocError):
    """Missing, malformed, or dimensionally mismatched input data."""


class MeshError(DataError):
    """Invalid surface geometry (parse failure, degenerate face, bad index)."""


class NumericalError(CortlocError):
    """A numerical routine broke down (singular solve, non-finite values)."""
