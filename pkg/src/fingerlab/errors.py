"""Exception hierarchy shared across the package."""


class FingerlabError(Exception):
    """Base class for all package errors."""


class FormatError(FingerlabError):
    """A file or byte stream does not conform to its expected layout."""


class ValidationError(FingerlabError):
    """A value violates a domain invariant."""


class AlignmentError(FingerlabError):
    """Two tracks cannot be aligned (piece or frame-rate mismatch)."""


class CoverageError(FingerlabError):
    """A pose track does not cover the frames a companion track needs."""


class EditError(FingerlabError):
    """An edit operation cannot be applied (collision, unknown note, bad label)."""


class ConflictError(FingerlabError):
    """An optimistic-concurrency check failed (stale base version)."""


class PipelineError(FingerlabError):
    """A pipeline step is missing its prerequisites."""
