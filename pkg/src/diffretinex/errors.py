"""Exception types shared across the package.

The CLI maps these onto exit codes: InputError/ConfigError -> 1,
anything else -> 2.
"""


class InputError(ValueError):
    """Bad user-supplied data: wrong channel count, shape mismatch, unreadable file."""


class ConfigError(ValueError):
    """Inconsistent configuration: invalid schedule range, descriptor/param mismatch."""


class NumericError(ArithmeticError):
    """A computation left the numerically meaningful regime (e.g. schedule underflow)."""
