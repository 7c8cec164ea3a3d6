"""Exception types shared across the package."""


class MvpriorError(Exception):
    """Base class for package errors."""


class DataError(MvpriorError):
    """Malformed or inconsistent on-disk data (sidecars, .flo files, checkpoints)."""


class NumericError(MvpriorError):
    """Non-finite values or a failed numeric verification."""
