"""Exception types shared across the package.

The CLI maps each class to a distinct exit code, so raising the right
type is part of the module contracts.
"""


class MMTreeError(Exception):
    """Base class for all package errors."""


class ConfigError(MMTreeError):
    """Invalid configuration values or malformed config files."""


class IngestError(MMTreeError):
    """Behavior-log ingestion failed (too many malformed lines, bad schema)."""


class ShapeError(MMTreeError):
    """Tensor dimensions do not match the configured model."""


class LookupFailure(MMTreeError):
    """An item or node id is unknown to the store/tree being queried."""


class FrozenStoreError(MMTreeError):
    """Attempted write to a frozen embedding store."""


class TrainingError(MMTreeError):
    """Training diverged or produced non-finite values."""


class FormatError(MMTreeError):
    """Persisted artifact is corrupt, truncated, or has a wrong version."""


class DependencyError(MMTreeError):
    """A pipeline stage is missing an input artifact."""
