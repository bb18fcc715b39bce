"""Gaussian-kernel nearest-neighbour classification combined with Mixup."""
from .numerics import Tensor
from .kernel_classifier import CenterBank, KernelConfig, class_probabilities, nngk_loss
from .losses import LossSpec
from .harness import RunRecord, TrainConfig, relative_gain, train

__all__ = ["Tensor", "CenterBank", "KernelConfig", "class_probabilities", "nngk_loss",
           "LossSpec", "RunRecord", "TrainConfig", "relative_gain", "train"]
__version__ = "0.1.0"
