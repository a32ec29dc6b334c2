"""From-scratch tensor engine: pyramid receptive-field regressor, exact
backward passes, and the PRFX checkpoint format."""

from .model import (
    DepthwiseConv,
    ModelConfig,
    PointwiseConv,
    PyramidBlock,
    PyramidRegressor,
    SepConv,
)
from .checkpoint import (
    CheckpointFormatError,
    load_model,
    model_from_bytes,
    model_to_bytes,
    save_model,
)

__all__ = [
    "CheckpointFormatError",
    "DepthwiseConv",
    "ModelConfig",
    "PointwiseConv",
    "PyramidBlock",
    "PyramidRegressor",
    "SepConv",
    "load_model",
    "model_from_bytes",
    "model_to_bytes",
    "save_model",
]
