"""Graph selective attention networks on a small numpy autodiff engine."""

from .graph import Graph, load_bundle, save_bundle
from .layer import SALayer
from .model import Metrics, SATModel, TrainConfig, build_model, train

__version__ = "0.1.0"

__all__ = [
    "Graph",
    "Metrics",
    "SALayer",
    "SATModel",
    "TrainConfig",
    "build_model",
    "load_bundle",
    "save_bundle",
    "train",
]
