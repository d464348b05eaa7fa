"""Latent-belief energy-based trajectory forecasting on a small numpy autodiff core."""

from .dataio import TrajectoryScene
from .errors import ConfigError, DataError, LBEBMError, NumericalError
from .model import LBEBM, ModelConfig
from .sampler import LangevinConfig, NoiseStream
from .training import TrainConfig, train

__all__ = [
    "LBEBM",
    "ConfigError",
    "DataError",
    "LBEBMError",
    "LangevinConfig",
    "ModelConfig",
    "NoiseStream",
    "NumericalError",
    "TrainConfig",
    "TrajectoryScene",
    "train",
]

__version__ = "0.1.0"
