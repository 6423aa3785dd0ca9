class LightX3ECGError(Exception):
    """Base class for every error raised by the engine."""


class ShapeError(LightX3ECGError, ValueError):
    """An array or argument violates the shape contract of an operation."""


class ConfigError(LightX3ECGError, ValueError):
    """Configuration file or flag is invalid."""


class RecordFormatError(LightX3ECGError, ValueError):
    """A record or manifest file cannot be parsed."""


class CheckpointError(LightX3ECGError, ValueError):
    """A checkpoint container is corrupted or incompatible."""


class TrainingError(LightX3ECGError, RuntimeError):
    """Training aborted (non-finite values, failed cross-validation round)."""
