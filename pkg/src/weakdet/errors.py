"""Exception types shared across the package."""


class WeakdetError(Exception):
    """Base class for all package errors."""


class ShapeError(WeakdetError):
    """Operand dimensions do not agree."""


class NumericError(WeakdetError):
    """A forward value became NaN/Inf, or an input is outside an op's domain."""


class EmptyBagError(WeakdetError):
    """An operation received a bag with no proposals."""


class DegenerateInputError(WeakdetError):
    """Near-zero norm, zero variance, or another degenerate input."""


class ParameterError(WeakdetError):
    """A hyperparameter is outside its valid range."""


class UsageError(WeakdetError):
    """An API was called out of contract (e.g. backward on a non-scalar)."""


class ContractError(WeakdetError):
    """Inputs violate a documented cross-argument contract."""


class ConfigError(WeakdetError):
    """A configuration value or combination is invalid."""


class ParseError(WeakdetError):
    """A file could not be parsed; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CompatibilityError(WeakdetError):
    """Checkpoint and dataset disagree on dimensions."""
