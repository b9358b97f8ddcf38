"""Exception types shared across the package."""


class HoughMatchError(Exception):
    pass


class InvalidInputError(HoughMatchError, ValueError):
    """Arguments violate an operation's preconditions."""


class FormatError(HoughMatchError):
    """A file does not follow its documented layout.

    ``offset`` is the byte position where parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(HoughMatchError, ArithmeticError):
    """A computation produced a non-finite value."""
