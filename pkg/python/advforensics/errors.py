"""Exception hierarchy.

Every error raised by advforensics derives from :class:`AdvForensicsError`.
Subclasses carry the process exit code the CLI reports for them.
"""

from __future__ import annotations

from typing import Optional, Sequence


class AdvForensicsError(Exception):
    """Base class for all advforensics errors."""

    exit_code = 3


class ConfigError(AdvForensicsError):
    """Invalid configuration or run-directory state."""

    exit_code = 1

    def __init__(self, message: str, violations: Sequence[str] = ()):
        super().__init__(message)
        self.violations = list(violations)


class UsageError(AdvForensicsError):
    """Bad command-line usage."""

    exit_code = 1


class DataError(AdvForensicsError):
    """Input data does not satisfy a record or manifest invariant."""

    exit_code = 2


class ManifestError(DataError):
    """A manifest line is malformed or violates a record invariant."""

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SplitLeakError(ManifestError):
    """One video appears in more than one split."""


class CalibrationError(DataError):
    """The similarity distribution cannot be calibrated."""


class ClusteringError(DataError):
    """Clustering cannot produce the requested number of clusters."""


class MetricError(DataError):
    """A metric is undefined for its input (e.g. single-class AUC)."""


class EmbeddingProviderError(AdvForensicsError):
    """An embedding provider failed or produced an unusable vector."""

    def __init__(self, message: str, provider: Optional[str] = None):
        if provider is not None:
            message = f"[{provider}] {message}"
        super().__init__(message)
        self.provider = provider


class CacheIntegrityError(AdvForensicsError):
    """The embedding cache file is corrupt."""

    def __init__(self, message: str, key: Optional[str] = None):
        if key is not None:
            message = f"{message} (key={key!r})"
        super().__init__(message)
        self.key = key


class NumericalError(AdvForensicsError):
    """A loss term became NaN or infinite."""

    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term {term!r}: {value}")
        self.term = term
        self.value = value


class ContractViolation(AdvForensicsError):
    """A pure operation was called outside its pre-conditions."""


class ShapeError(ContractViolation):
    """A tensor does not have the expected shape."""

    def __init__(self, what: str, expected, actual):
        super().__init__(f"{what}: expected {expected}, got {actual}")
        self.expected = expected
        self.actual = actual
