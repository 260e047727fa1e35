"""Dense-concatenation convolutional networks on a small numpy autodiff engine."""

from .graph import ModuleGraph, config_hash, deserialize_architecture, serialize_architecture
from .tensor import Tape, Tensor
from .zoo import ModelConfig, build_model, build_preset, resolve

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "ModuleGraph", "Tape", "Tensor", "build_model", "build_preset", "config_hash",
    "deserialize_architecture", "resolve", "serialize_architecture",
]
