"""Exception hierarchy shared by every module."""


class EasterError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(EasterError, ValueError):
    pass


class InfeasibleAlignmentError(InvalidArgumentError):
    """The label cannot be aligned to a lattice of the given length."""


class ConfigurationError(EasterError, ValueError):
    pass


class DataError(EasterError, ValueError):
    pass


class CheckpointError(EasterError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TrainingDivergedError(EasterError, RuntimeError):
    """A training step produced a non-finite loss."""
