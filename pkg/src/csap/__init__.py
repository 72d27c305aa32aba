"""Cross-scale attention propagation (CSAP) decoder on a small NumPy autodiff core."""

from .decoder import PRESETS, DecoderConfig, SegmentationModel, build_decoder, forward_csap, forward_standard
from .errors import (
    ConfigError,
    CSAPError,
    FormatError,
    GraphStateError,
    NumericError,
    ShapeError,
    TrainingError,
)
from .tensor import Parameter, Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "PRESETS",
    "ConfigError",
    "CSAPError",
    "DecoderConfig",
    "FormatError",
    "GraphStateError",
    "NumericError",
    "Parameter",
    "SegmentationModel",
    "ShapeError",
    "Tensor",
    "TrainingError",
    "backward",
    "build_decoder",
    "forward_csap",
    "forward_standard",
    "no_grad",
]
