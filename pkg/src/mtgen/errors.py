"""Exception types shared across mtgen."""

from .diffnum import CheckpointError, DimensionError, NonFiniteError


class ParameterError(ValueError):
    """An argument is outside its allowed range."""


class UsageError(RuntimeError):
    """An operation was called in a state or combination it does not support."""


class ConfigurationError(ValueError):
    """Models, checkpoints or config values are inconsistent with each other."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss."""




class OrderingError(UsageError):
    """A pipeline step was requested before the step it depends on."""


class UnsupportedLatentError(ConfigurationError):
    """The operation only supports a particular latent size."""


__all__ = [
    "CheckpointError", "ConfigurationError", "DimensionError", "NonFiniteError", "OrderingError",
    "ParameterError", "TrainingDivergedError", "UnsupportedLatentError", "UsageError",
]
