"""Exception hierarchy shared by every module."""


class CrispeError(Exception):
    """Base class for library errors."""


class ValidationError(CrispeError, ValueError):
    """An argument or configuration value is out of its allowed range."""


class DimensionError(ValidationError):
    """Array shapes do not conform."""


class NumericalError(CrispeError, ArithmeticError):
    """A numerical routine failed (e.g. eigensolver did not converge)."""


class SizeError(ValidationError):
    """A dense object would exceed the desk-scale guard."""


class StateError(CrispeError, RuntimeError):
    """An object is in the wrong state for the requested operation."""


class ParseError(CrispeError, ValueError):
    """A binary file is malformed. ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
