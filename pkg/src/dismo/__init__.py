"""Motion representation learning on a factored synthetic sprite world.

A motion extractor and a flow-matching frame generator are trained jointly
from raw clips; the package also ships the data generator, augmentation
pipeline, autoregressive motion transfer, and a disentanglement evaluation
suite (kNN probes, kNN mutual-information estimators, permutation tests,
PCA analyses).
"""

__version__ = "0.1.0"

from dismo.errors import (
    ConfigurationError,
    CorruptDatasetError,
    DegenerateDataError,
    NotFoundError,
    TrainingDivergedError,
)

__all__ = [
    "__version__",
    "ConfigurationError",
    "CorruptDatasetError",
    "DegenerateDataError",
    "NotFoundError",
    "TrainingDivergedError",
]
