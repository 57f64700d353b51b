"""Exception types shared across the package."""


class XflowError(Exception):
    """Base class for all xflow errors."""


class ParseError(XflowError):
    """Malformed input file; carries the 1-based line number when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(XflowError):
    """Input violates a documented invariant."""


class DivergenceError(XflowError):
    """Optimization produced a non-finite loss."""

    def __init__(self, message, step=None):
        self.step = step
        super().__init__(message)
