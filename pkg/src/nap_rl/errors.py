"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """An argument violates an operation's precondition."""


class UsageError(RuntimeError):
    """An object was used out of order (e.g. stepping a finished session)."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values (divergence)."""


class ActParseError(InvalidInputError):
    """Malformed dialog-act string; ``position`` is the offending index."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position
