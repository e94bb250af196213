"""Shared exception types."""


class ShapeError(ValueError):
    """Array shapes do not conform for the requested operation."""


class ConfigError(ValueError):
    """Invalid configuration (hyperparameters, adapter wiring, corpus spec)."""


class CapacityError(RuntimeError):
    """Context grew past the model's maximum position budget."""


class CorpusError(ValueError):
    """Malformed corpus input; message carries the offending line number."""


class CheckpointError(ValueError):
    """Unreadable or incompatible weight file."""
