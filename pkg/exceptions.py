"""Error hierarchy shared by every PANet module."""


class PanetError(Exception):
    """Base class for all errors raised by this project"""


class DimensionError(PanetError, ValueError):
    """Tensor extents do not line up for the requested operation"""


class ConfigurationError(PanetError, ValueError):
    """An operation was configured with values it cannot honour"""


class UsageError(PanetError, ValueError):
    """A caller passed arguments outside an operation's contract"""


class NumericalError(PanetError, ArithmeticError):
    """A forward computation produced a non-finite value"""


class TrainingError(PanetError):
    """Optimization had to stop (e.g. non-finite loss on a sample)"""


class ArtifactIOError(PanetError, OSError):
    """Reading or writing a file failed; the message carries the path"""


class DatasetFormatError(PanetError):
    """A dataset file is corrupt, truncated or of an unknown version"""


class CheckpointError(PanetError):
    """A checkpoint file is corrupt, truncated or of an unknown version"""


class CheckpointMismatchError(CheckpointError):
    """A checkpoint was written for different hyperparameters"""
