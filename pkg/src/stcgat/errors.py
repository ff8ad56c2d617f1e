"""Exception hierarchy shared by every stcgat module."""


class StcgatError(Exception):
    """Base class for all library errors."""


class DimensionError(StcgatError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(StcgatError, ValueError):
    """A caller violated an operation's precondition."""


class ConfigError(StcgatError, ValueError):
    """Invalid configuration value or combination."""


class NumericError(StcgatError, ArithmeticError):
    """A NaN/Inf or a degenerate value appeared during computation."""


class IngestError(StcgatError, ValueError):
    """Dataset or edge-list file is malformed."""


class CheckpointError(StcgatError, ValueError):
    """Checkpoint file is corrupt or does not match the expected config."""


class TrainingError(NumericError):
    """Training diverged; carries the epoch and batch where it happened."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class UndefinedMetricError(ContractError):
    """A metric has no unmasked elements to average over."""
