"""Exception hierarchy shared by every srmae module."""


class SrmaeError(Exception):
    """Base class for all srmae errors."""


class ShapeError(SrmaeError):
    """Tensor extents do not line up for the requested operation."""


class NumericError(SrmaeError):
    """A computation produced NaN/Inf from finite inputs."""


class UsageError(SrmaeError):
    """API misuse, e.g. backward on a non-scalar or a consumed graph."""


class ConfigurationError(SrmaeError):
    """Invalid or inconsistent configuration values."""


class IngestionError(SrmaeError):
    """Dataset files could not be read or are inconsistent."""


class CheckpointError(SrmaeError):
    """Checkpoint file is unreadable, corrupt, or version-mismatched."""


class VerificationError(SrmaeError):
    """A gradient or property check exceeded its tolerance."""
