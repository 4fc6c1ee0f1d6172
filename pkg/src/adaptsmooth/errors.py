"""Exception hierarchy shared across the package."""


class AdaptSmoothError(Exception):
    """Base class for all package errors."""


class UsageError(AdaptSmoothError):
    """Bad arguments or inconsistent options."""


class DataError(AdaptSmoothError):
    """Malformed files, manifests, or degenerate input data."""


class NumericalError(AdaptSmoothError):
    """Non-finite values encountered during optimization."""
