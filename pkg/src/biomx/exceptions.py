"""Exception hierarchy shared by all biomx modules."""


class BiomxError(Exception):
    """Base class for errors raised by biomx."""


class FormatError(BiomxError, ValueError):
    """A file or in-memory structure violates its declared layout."""


class TruncationError(FormatError):
    """A file ends before the bytes its header promises."""


class MergeError(BiomxError, ValueError):
    """Checkpoints or task vectors cannot be combined."""

    def __init__(self, message, mismatches=()):
        super().__init__(message)
        self.mismatches = list(mismatches)


class DatasetRecordError(FormatError):
    """A dataset line failed validation."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TransportError(BiomxError, RuntimeError):
    """A remote endpoint could not be reached or returned an HTTP error."""


class ScoringError(BiomxError, RuntimeError):
    """A scorer backend failed to produce option scores."""

    def __init__(self, message, item_id=None):
        super().__init__(message)
        self.item_id = item_id


class ProtocolError(ScoringError):
    """A remote endpoint answered with something that is not the expected JSON."""
