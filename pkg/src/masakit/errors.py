"""Shared exception types.

The CLI maps ValidationError (and subclasses) to exit code 1 and
NumericalError to exit code 2.
"""


class ValidationError(ValueError):
    """Bad configuration, malformed input, or a contract violation caught before compute."""


class NumericalError(RuntimeError):
    """A computation produced non-finite values or failed to converge."""
