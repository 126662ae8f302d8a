"""Exception hierarchy shared across the package."""


class RetinaGenError(Exception):
    """Base class for all package errors."""


class ShapeError(RetinaGenError):
    """Tensor shapes incompatible with the requested operation."""


class ConfigError(RetinaGenError):
    """Invalid configuration value, flag combination, or mode string."""


class DataError(RetinaGenError):
    """Dataset manifest, feature file, or record validation failure."""


class CheckpointError(RetinaGenError):
    """Corrupt, truncated, or config-incompatible checkpoint file."""


class IntegrityError(RetinaGenError):
    """A runtime invariant was violated (e.g. unnormalized attention row)."""


class TrainingError(RetinaGenError):
    """Training aborted (e.g. non-finite loss)."""
