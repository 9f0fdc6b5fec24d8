"""Exception types shared across the pipeline."""


class TransferenceError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(TransferenceError):
    """Tensor dimensions do not agree for the requested operation."""


class NumericError(TransferenceError):
    """Non-finite values where finite ones are required."""


class ContractError(TransferenceError):
    """A documented precondition was violated by the caller."""


class ConfigError(TransferenceError):
    """Invalid configuration value or combination."""


class DataError(TransferenceError):
    """A corpus or model cannot be built from the given data."""


class AlignmentError(DataError):
    """Parallel files disagree on line counts."""


class TrainingError(TransferenceError):
    """Training failed (non-finite gradients, divergence, ...)."""


class CheckpointError(TransferenceError):
    """Checkpoint files or parameter sets are inconsistent."""


class StageError(TransferenceError):
    """A pipeline stage failed; carries the stage name and the cause."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
