"""Image classification with trainable PEPS tensor networks.

Example:
    ```python
    import asyncio
    from pathlib import Path

    from pepsnet import PepsClassifier, Trainer, TrainConfig
    from pepsnet.cli import load_splits
    from pepsnet.config import RunConfig

    config = TrainConfig(bond_dim=2, chi=10, epochs=5)
    train, val, test = load_splits(config, RunConfig(data_dir=Path("data"), subset=2000))

    model = PepsClassifier.create(config)
    result = asyncio.run(Trainer(config, workers=4).fit(model, train, val, test))
    print(result.test_acc_at_best)
    ```
"""

from .classifier import PepsClassifier, SampleGradient
from .config import RunConfig, TrainConfig
from .exceptions import (
    PepsArgumentError,
    PepsCapacityError,
    PepsCheckpointError,
    PepsConfigError,
    PepsDimensionError,
    PepsError,
    PepsFormatError,
    PepsTrainingError,
)
from .trainer import FitResult, MetricsWriter, Trainer
from .types import (
    AxisLabel,
    ContractionKind,
    ConvParams,
    Dataset,
    DatasetKind,
    DenseTensor,
    FeatureGrid,
    FeatureMapKind,
    Logits,
    Metrics,
    OptimizerKind,
    Split,
    SplitMetrics,
    SvdResult,
)

__version__ = "0.1.0"

__all__ = [
    # Core
    "PepsClassifier",
    "SampleGradient",
    "Trainer",
    "FitResult",
    "MetricsWriter",
    # Config
    "TrainConfig",
    "RunConfig",
    # Exceptions
    "PepsError",
    "PepsArgumentError",
    "PepsCapacityError",
    "PepsCheckpointError",
    "PepsConfigError",
    "PepsDimensionError",
    "PepsFormatError",
    "PepsTrainingError",
    # Types
    "AxisLabel",
    "ContractionKind",
    "ConvParams",
    "Dataset",
    "DatasetKind",
    "DenseTensor",
    "FeatureGrid",
    "FeatureMapKind",
    "Logits",
    "Metrics",
    "OptimizerKind",
    "Split",
    "SplitMetrics",
    "SvdResult",
]
