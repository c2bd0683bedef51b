"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """Raised when an input violates an operation's precondition."""


class FormatError(ValueError):
    """Raised when a file does not follow the expected binary or JSON layout."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class NumericError(ArithmeticError):
    """Raised when a computation produces a non-finite value."""
