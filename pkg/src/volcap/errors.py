"""Exception types shared across the toolkit."""


class VolcapError(Exception):
    """Base class for all toolkit errors."""


class InvalidInputError(VolcapError):
    """An argument value violates an operation's precondition."""


class InvalidGeometryError(VolcapError):
    """A geometric precondition fails (e.g. point behind the camera)."""


class MalformedFileError(VolcapError):
    """A file or byte stream does not match its declared layout.

    ``offset`` carries the byte offset at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ValidationError(VolcapError):
    """A manifest, configuration, or CLI input fails validation."""
