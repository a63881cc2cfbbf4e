"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Argument violates a documented precondition."""


class DegenerateInputError(InvalidInputError):
    """Input is well-formed but the requested statistic is undefined for it."""


class NumericFailure(ArithmeticError):
    """A forward or backward pass produced non-finite values."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class ManifestError(ValueError):
    """Malformed dataset manifest. ``line`` is 1-based and counts the header."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
