"""Exception hierarchy shared across the pipeline."""


class KneeplanError(Exception):
    """Base class for all pipeline errors."""


class DatasetLoadError(KneeplanError):
    """A sample file is missing or unreadable."""


class ValidationError(KneeplanError, ValueError):
    """Data violates a structural invariant (bounds, shapes, degenerate geometry)."""


class ConfigError(KneeplanError, ValueError):
    """Invalid network, training or phantom configuration."""


class PlanningError(KneeplanError):
    """Geometric planning could not be completed."""


class TrainingDivergedError(KneeplanError):
    """A loss became non-finite during training."""
