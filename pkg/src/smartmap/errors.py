"""Exception types shared across the package.

The CLI maps these onto its exit codes: configuration problems exit
with 2, data/shape problems with 3, numerical failures with 4.
"""


class SmartmapError(Exception):
    """Base class for package errors."""


class ConfigError(SmartmapError):
    """Invalid configuration (bad value, unknown key, infeasible request)."""


class DataError(SmartmapError):
    """Inconsistent data (shape mismatch, missing file, malformed sidecar)."""


class NumericalError(SmartmapError):
    """Numerical failure (SVD non-convergence, CG breakdown)."""
