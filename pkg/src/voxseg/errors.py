"""Exception hierarchy shared across the package."""


class VoxsegError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(VoxsegError):
    """A file does not parse as any supported volume format."""


class UnsupportedDtypeError(FormatError):
    """A file parses but uses a scalar type this reader does not ingest."""


class TruncatedFileError(FormatError):
    """Header-declared payload size exceeds the bytes actually present."""


class ShapeError(VoxsegError, ValueError):
    """Array arguments have incompatible or invalid shapes."""


class DegenerateInputError(VoxsegError, ValueError):
    """Input is numerically degenerate for the requested operation."""


class CheckpointError(VoxsegError):
    """Checkpoint file is corrupt or inconsistent with the requested config."""


class ConfigError(VoxsegError, ValueError):
    """Invalid configuration value or combination."""
