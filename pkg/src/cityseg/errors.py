"""Exception types shared across the package.

The CLI maps these onto exit codes: validation problems exit 2, I/O problems
exit 74.
"""


class CitysegError(Exception):
    """Base class for all package errors."""


class ValidationError(CitysegError, ValueError):
    """Input data violates a documented precondition."""


class ContractViolation(CitysegError, RuntimeError):
    """A pluggable component (e.g. a predictor) returned malformed output."""


class TileIOError(CitysegError, OSError):
    """A raster tile or exchange file is missing or cannot be decoded."""
