"""
Simulation and optimization of time-multiplexed holograms on heavily
quantized phase-only SLMs.
"""

from .field import ComplexField, FrameStack, GridSpec, InvalidFieldError, fft2_centered, ifft2_centered
from .propagation import CalibratedModel, DimensionError, TransferFunction, asm_propagate, build_transfer, model_forward
from .quantization import (ConfigurationError, QuantScheme, SurrogateSpec, angular_delta, gumbel_softmax_relax,
                           quantize, score, surrogate_gradient)
from .supervision import MaskSet, StftSpec, TargetContent, depth_to_masks, stft
from .optimizer import AnnealSchedule, OptimConfig, OptimRun, gradient, optimize
from .metrics import psnr, ssim

__version__ = "0.1.0"

__all__ = [
    "AnnealSchedule", "CalibratedModel", "ComplexField", "ConfigurationError", "DimensionError", "FrameStack",
    "GridSpec", "InvalidFieldError", "MaskSet", "OptimConfig", "OptimRun", "QuantScheme", "StftSpec",
    "SurrogateSpec", "TargetContent", "TransferFunction", "angular_delta", "asm_propagate", "build_transfer",
    "depth_to_masks", "fft2_centered", "gradient", "gumbel_softmax_relax", "ifft2_centered", "model_forward",
    "optimize", "psnr", "quantize", "score", "ssim", "stft", "surrogate_gradient",
]
