"""Exception hierarchy shared by all incepformer modules."""


class IncepFormerError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(IncepFormerError):
    """Tensor dimensions are inconsistent with an operation's contract."""


class ConfigError(IncepFormerError):
    """A configuration value is invalid or violates a model invariant."""


class ContractError(IncepFormerError):
    """An API was used outside its contract (bad argument, missing state)."""


class NumericsError(IncepFormerError):
    """A computation produced non-finite values or degenerate statistics."""


class CheckpointError(IncepFormerError):
    """Base class for checkpoint I/O failures."""


class CheckpointMagicError(CheckpointError):
    """The file does not start with the expected magic bytes."""


class CheckpointTruncatedError(CheckpointError):
    """The file ended before the declared payload was read."""


class CheckpointShapeError(CheckpointError):
    """A stored tensor does not match the target model (shape or name)."""
