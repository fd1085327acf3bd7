"""Continual metric learning for point-cloud place retrieval.

Training distills ranking structure and embedding distributions from a
frozen old model while replaying buffered exemplars; evaluation tracks a
step-by-task recall matrix, a forgetting score, and fused old+new retrieval.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigurationError,
    IngestionError,
    RankfuseError,
    TrainingError,
    UsageError,
)

__all__ = [
    "__version__",
    "ConfigurationError",
    "IngestionError",
    "RankfuseError",
    "TrainingError",
    "UsageError",
]
