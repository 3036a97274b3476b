"""Desk-scale CaraNet segmentation: numpy autodiff engine, the network with
its partial decoder / channel-split feature pyramid / axial reverse attention,
a deep-supervised training loop, the six-metric evaluation suite, and
small-object size-ratio analysis."""

from .tensor import Tensor, Parameter, NumericalError, grad_check
from .model import CaraNet, CaraNetConfig, EncoderFeatures, PredictionSet

__all__ = [
    "Tensor",
    "Parameter",
    "NumericalError",
    "grad_check",
    "CaraNet",
    "CaraNetConfig",
    "EncoderFeatures",
    "PredictionSet",
]
