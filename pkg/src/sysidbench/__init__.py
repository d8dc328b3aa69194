"""System-identification benchmark: neural ODE vs neural state-space vs subspace models."""

from .base import BaseForecaster, NodeForecaster, NssmForecaster, SubspaceForecaster
from .checkpoint import load_forecaster, save_forecaster
from .trajectory import (
    DatasetSplit,
    NormStats,
    Trajectory,
    Window,
    downsample,
    load_csv,
    normalize,
    normalize_split,
    save_csv,
    split_thirds,
    windows,
)

__version__ = "0.1.0"

__all__ = [
    "BaseForecaster",
    "DatasetSplit",
    "NodeForecaster",
    "NormStats",
    "NssmForecaster",
    "SubspaceForecaster",
    "Trajectory",
    "Window",
    "downsample",
    "load_csv",
    "load_forecaster",
    "normalize",
    "normalize_split",
    "save_csv",
    "save_forecaster",
    "split_thirds",
    "windows",
    "__version__",
]
