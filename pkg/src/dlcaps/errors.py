"""Exception hierarchy shared by every layer of the library."""


class DLCapsError(Exception):
    """Base class for library errors."""


class ConfigurationError(DLCapsError, ValueError):
    """Inconsistent shapes or configuration values."""


class UsageError(DLCapsError, ValueError):
    """An API was called with arguments outside its contract."""


class NumericError(DLCapsError, FloatingPointError):
    """A non-finite value was produced while debug checks were active."""


class FormatError(DLCapsError, ValueError):
    """A dataset or checkpoint file does not match its binary layout."""


class CheckpointError(DLCapsError):
    """A checkpoint cannot be used with the requested model or dataset."""
