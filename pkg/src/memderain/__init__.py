"""Memory-guided single-image de-raining, NumPy reference implementation."""

from .memory import MemoryBank, init_memory, read, update
from .model import ModelConfig, derain, forward, init_params
from .losses import BSWConfig, LossWeights
from .train import TrainConfig, TrainState, train

__version__ = "0.1.0"

__all__ = ["MemoryBank", "init_memory", "read", "update", "ModelConfig", "derain", "forward",
           "init_params", "BSWConfig", "LossWeights", "TrainConfig", "TrainState", "train"]
