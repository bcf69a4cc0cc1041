"""Exception types shared across the package.

`InputError` maps to CLI exit code 1, `DivergenceError` to exit code 2.
"""


class DuosentError(Exception):
    """Base class for package errors."""


class InputError(DuosentError):
    """Invalid input data, file, or configuration key."""


class DivergenceError(DuosentError):
    """Training aborted after repeated non-finite losses."""
