"""Exception types shared across the toolkit.

The CLI maps ValidationError to exit code 2 and FormatError / OSError to
exit code 3.
"""


class ValidationError(ValueError):
    """Invalid argument, shape, or state detected before/while computing."""


class FormatError(RuntimeError):
    """Malformed or inconsistent on-disk data (bad magic, truncation, ...)."""
