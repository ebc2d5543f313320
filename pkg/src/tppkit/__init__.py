"""Neural temporal point processes: encoders, intensity decoders, likelihoods and a Hawkes oracle."""

from .dataio import DatasetFile, EventSequence, load_dataset, save_dataset
from .errors import NumericalError, ShapeError, TPPError, ValidationError
from .model import ModelConfig, TPPModel, build_model

__all__ = [
    "DatasetFile", "EventSequence", "load_dataset", "save_dataset",
    "NumericalError", "ShapeError", "TPPError", "ValidationError",
    "ModelConfig", "TPPModel", "build_model",
]
__version__ = "0.1.0"
