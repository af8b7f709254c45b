"""Exception types shared across the package."""


class FormatError(ValueError):
    """Malformed or unsupported on-disk data."""


class NumericError(RuntimeError):
    """A numerical check failed (gradient mismatch, divergence)."""
