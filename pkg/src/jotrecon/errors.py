"""Exception types shared across the package."""


class DimensionMismatchError(ValueError):
    """Operands have incompatible grid or vector dimensions."""


class DivergenceError(RuntimeError):
    """Fixed-step descent increased the objective on consecutive iterations."""


class NonFiniteError(RuntimeError):
    """A gradient, activation, or loss became NaN or infinite."""
