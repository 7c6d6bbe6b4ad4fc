"""Exception hierarchy shared by every dgc module."""


class DGCError(Exception):
    """Base class for dgc failures."""


class FormatError(DGCError):
    """A binary file does not follow its declared layout."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ShapeError(DGCError, ValueError):
    """Array shapes or dimensions are inconsistent."""


class ConfigError(DGCError, ValueError):
    """A configuration value or spec violates its schema."""


class CheckpointError(FormatError):
    pass


class ConfigMismatchError(CheckpointError):
    """Checkpoint was written under a different model configuration."""


class NumericalError(DGCError):
    """Training produced non-finite values that could not be recovered."""


class DatasetError(DGCError):
    """A dataset lists no cubes, or none of its cubes can be read."""
