"""Wavelet / snake-scan state-space segmentation network on a small numpy autodiff core."""
from .autograd import NonFiniteError, Tape, Tensor, no_record
from .network import ModelConfig, SegOutput, TopoWMamba, build_model, model_forward

__version__ = "0.1.0"

__all__ = ["NonFiniteError", "Tape", "Tensor", "no_record", "ModelConfig", "SegOutput",
           "TopoWMamba", "build_model", "model_forward", "__version__"]
