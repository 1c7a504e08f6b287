"""Exception hierarchy shared across the package.

Every error carries a short machine-parsable ``code`` so the CLI can print
``error: <code>: <message>`` and tests can match on codes instead of text.
"""


class NextClipError(Exception):
    code = "error"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class InvalidConfigError(NextClipError):
    code = "invalid-config"


class InvalidPartitionError(NextClipError):
    code = "invalid-partition"


class DomainError(NextClipError):
    """A scalar argument is outside its documented domain."""

    code = "domain"


class ShapeError(NextClipError):
    code = "shape"


class BadMagicError(NextClipError):
    code = "bad-magic"


class VersionMismatchError(NextClipError):
    code = "version-mismatch"


class TruncatedPayloadError(NextClipError):
    code = "truncated"


class CheckpointError(NextClipError):
    code = "checkpoint"


class NumericalError(NextClipError):
    """Non-finite values appeared during a forward pass or training step."""

    code = "numerical"

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer
