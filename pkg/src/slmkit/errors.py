"""Exception types shared across the package."""


class InvalidStateError(RuntimeError):
    """An operation was requested in a state that does not allow it."""


class GradientCheckError(RuntimeError):
    """Finite-difference evaluation produced a non-finite loss."""


class MalformedOutputError(ValueError):
    """A generated record does not follow the joint output grammar."""

    def __init__(self, message: str, segment: str = ""):
        super().__init__(message)
        self.segment = segment


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass
