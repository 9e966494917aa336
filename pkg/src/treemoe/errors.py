"""Exception types shared across the package."""


class DataError(Exception):
    """Malformed or inconsistent on-disk data (files, checkpoints, datasets)."""


class NumericError(RuntimeError):
    """Non-finite values encountered where training cannot continue."""
