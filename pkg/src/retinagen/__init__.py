"""retinagen: keyword-driven medical report generation for retinal images.

A self-contained, float64, numpy-backed stack: a reverse-mode tensor engine,
text and image pipelines, keyword/image encoders with attention fusion, two
report decoders, a multi-label keyword predictor, the standard caption metric
suite, attention-trace export, and a CLI.
"""

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    IntegrityError,
    RetinaGenError,
    ShapeError,
    TrainingError,
)

__all__ = [
    "__version__",
    "RetinaGenError",
    "ShapeError",
    "ConfigError",
    "DataError",
    "CheckpointError",
    "IntegrityError",
    "TrainingError",
]
