"""Multi-scenario recommendation foundation model at desk scale.

Heterogeneous H/R/T tokenization, a hybrid target/full attention stack with
grouped-query attention and timestamp masking, MMoE heads, and the tooling
needed to verify its structural properties.
"""

from mtfm.config import GeneratorConfig, ModelConfig, TrainConfig
from mtfm.errors import (
    ConfigurationError,
    DatasetParseError,
    DimensionError,
    IntegrityError,
    MTFMError,
)

__all__ = [
    "ConfigurationError",
    "DatasetParseError",
    "DimensionError",
    "GeneratorConfig",
    "IntegrityError",
    "MTFMError",
    "ModelConfig",
    "TrainConfig",
]

__version__ = "0.1.0"
