"""Exception types shared across the package."""


class FormatError(ValueError):
    """A file does not match its binary or JSON layout.

    ``offset`` is the byte offset where parsing failed, or ``None`` for JSON
    field errors (the message then names the field).
    """

    def __init__(self, message: str, offset: int | None = None, path=None):
        self.offset = offset
        self.path = path
        where = f" at offset {offset}" if offset is not None else ""
        prefix = f"{path}: " if path is not None else ""
        super().__init__(f"{prefix}{message}{where}")


class NumericalError(RuntimeError):
    """A computation produced a non-finite value."""

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        super().__init__(message)
