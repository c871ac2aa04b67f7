"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes (validation 2, numerical 3,
guidance-unreachable 4).
"""


class ValidationError(ValueError):
    """Input violates a documented precondition or type invariant."""


class DimensionError(ValidationError):
    """Array shapes or lengths do not line up."""


class InvariantError(ValidationError):
    """A constructed value violates its type invariants."""


class FormatError(ValidationError):
    """A file on disk does not match its documented layout."""


class NumericalError(ArithmeticError):
    """A computation produced NaN/Inf where finite values are required."""


class GuidanceUnavailableError(RuntimeError):
    """The guidance provider could not be reached or kept failing."""
