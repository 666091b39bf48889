"""Single-image tree reconstruction, space-colonization growth and phenotyping."""

__version__ = "0.1.0"


class InvalidArgument(ValueError):
    """Raised when inputs violate an operation's preconditions."""


class UnsupportedOperation(TypeError):
    """Raised when an operation is requested on an object that cannot provide it."""


class UndefinedTrait(ValueError):
    """Raised when a phenotype cannot be measured on the given tree."""


class DegenerateResult(UserWarning):
    """Emitted when a stage produced a usable but degenerate result."""
