"""Exception types shared across the package."""


class AvseError(Exception):
    """Base class for every error raised by this library."""


class DomainError(AvseError, ValueError):
    """An argument or input violates a documented precondition."""


class FormatError(AvseError):
    """A persisted file is malformed.

    ``offset`` is the byte position at which parsing failed, when known.
    """

    def __init__(self, message: str, *, offset: int | None = None):
        super().__init__(message)
        self.offset = offset


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class VersionMismatchError(FormatError):
    """File was written with an unsupported format version."""


class ChecksumError(FormatError):
    """Payload bytes do not match the stored checksum."""


class TruncatedFileError(FormatError):
    """File ends before the declared payload does."""


class TrainingDivergedError(AvseError):
    """Loss became non-finite during training."""
