"""Exception types shared across the package."""


class GeoworldError(Exception):
    pass


class InvalidArgument(GeoworldError, ValueError):
    """A caller-supplied value is outside the documented domain."""


class ContractError(GeoworldError, ValueError):
    """Shapes or structural preconditions do not line up."""


class NumericalError(GeoworldError, ArithmeticError):
    """A computation produced NaN or Inf.

    ``op`` names the primitive (or pipeline stage) that produced it.
    """

    def __init__(self, op, message=None):
        self.op = op
        super().__init__(message or f"non-finite value produced by {op!r}")


class ConfigError(GeoworldError, ValueError):
    """A run configuration failed validation.  ``path`` is the dotted key."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")
