"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input violates a documented precondition or invariant."""


class CapacityError(RuntimeError):
    """Exact enumeration or partitioning would exceed a configured limit."""


class FormatError(ValueError):
    """A binary file does not carry the expected IDX magic number."""


class ConsistencyError(ValueError):
    """Two related inputs disagree (e.g. image and label counts)."""


class TruncatedFileError(OSError):
    """A binary file ended before its header-declared payload."""


class InsufficientDataError(ValueError):
    """Too few usable points remain to fit a model."""
