"""Desk-scale laboratory for visual Fourier prompt tuning.

A frozen vision transformer is adapted to new tasks by learning prompt
tokens, a configurable fraction of which passes through a 2D discrete
Fourier transform (real part kept) before entering each encoder layer.
The package bundles the autodiff engine, the spectral transforms, the
transformer, synthetic tasks with controlled pretrain/finetune disparity,
the training drivers, and the loss-landscape / Hessian / attention
instruments used to study the method.
"""

from .backbone import Backbone, BackboneConfig
from .data import Dataset, Splits, TaskSpec
from .prompts import PromptBank, PromptConfig, PromptedClassifier
from .spectral import ComplexBuffer, dft_naive, fft, fourier1d_real, fourier2d_real, ifft
from .tensor import Tensor, backward, no_grad
from .training import RunRecord, TrainConfig, Tuner, cosine_lr

__version__ = "0.1.0"

__all__ = [
    "Backbone", "BackboneConfig", "ComplexBuffer", "Dataset", "PromptBank",
    "PromptConfig", "PromptedClassifier", "RunRecord", "Splits", "TaskSpec",
    "Tensor", "TrainConfig", "Tuner", "backward", "cosine_lr", "dft_naive",
    "fft", "fourier1d_real", "fourier2d_real", "ifft", "no_grad",
]
