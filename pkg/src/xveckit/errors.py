"""Exception hierarchy shared by every module.

The CLI maps ToolkitError (and OSError) to exit code 1; anything else is
an internal failure and exits 2.
"""


class ToolkitError(Exception):
    """Base class for all expected failures."""


class ConfigurationError(ToolkitError):
    """Invalid configuration value or incompatible argument shapes."""


class UsageError(ToolkitError):
    """An API or CLI was driven in an unsupported way."""


class DataError(ToolkitError):
    """Input data violates a documented precondition."""


class InputTooShortError(DataError):
    """Utterance or crop shorter than the minimum the operation supports."""


class PoolingError(DataError):
    """Too few frames survive the frame layers to pool statistics."""


class BatchTooSmallError(DataError):
    """Batch normalization in train mode needs at least two rows."""


class EmptyAfterVadError(DataError):
    """Voice activity detection removed every frame of an utterance."""


class TrainingDivergedError(ToolkitError):
    """Non-finite loss or gradient encountered during optimization."""


class ParseError(DataError):
    """A serialized artifact could not be decoded."""


class BadMagicError(ParseError):
    """File does not start with the expected magic bytes."""


class TruncatedFileError(ParseError):
    """File payload shorter (or longer) than its header promises."""


class DimMismatchError(ParseError):
    """Dimensions recorded in a file disagree with their context."""
