"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A module was built or called with inconsistent configuration."""


class ShapeError(ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class NumericError(RuntimeError):
    """Non-finite values were encountered where finite ones are required."""
