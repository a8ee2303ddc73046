"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class ConfigError(ValueError):
    """A configuration object violates one of its constraints."""


class ParseError(ValueError):
    """An on-disk artifact (manifest, image, checkpoint) is malformed."""


class DivergenceError(ArithmeticError):
    """An optimization produced a non-finite objective."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
