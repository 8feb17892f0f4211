"""Exception hierarchy shared across the package.

The CLI maps :class:`ValidationError` (and subclasses) to exit code 1 and
:class:`NumericError` to exit code 2.
"""


class ValidationError(ValueError):
    """Bad user input: config values, labels, paths, dataset contents."""


class DimensionError(ValidationError):
    """Tensor shapes do not agree with what an operation requires."""


class ConfigError(ValidationError):
    """A configuration is internally inconsistent or names unknown keys."""


class ContractError(RuntimeError):
    """An API was called in a state it does not support."""


class NumericError(ArithmeticError):
    """A NaN or infinity appeared where only finite values are allowed."""

    def __init__(self, message: str, state: dict | None = None):
        super().__init__(message)
        self.state = state or {}
