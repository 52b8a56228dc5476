class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class ContractError(ValueError):
    """Raised when a precondition on arguments (not shapes) is violated."""


class NumericError(RuntimeError):
    """Raised when training produces a non-finite loss."""


class CheckpointError(IOError):
    """Raised when a checkpoint file is truncated, corrupted or of the wrong version."""
