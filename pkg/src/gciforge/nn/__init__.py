from .gradcheck import GradCheckReport, grad_check, numeric_derivative
from .init import he_normal_init
from .layers import BatchNorm1d, Conv1d, Dense, Flatten, Relu, Sequential, Sigmoid, sigmoid
from .losses import bce_loss
from .optim import AdamState, adam_step
from .rng import SplitMix64

__all__ = [
    "AdamState", "BatchNorm1d", "Conv1d", "Dense", "Flatten", "GradCheckReport", "Relu",
    "Sequential", "Sigmoid", "SplitMix64", "adam_step", "bce_loss", "grad_check", "numeric_derivative",
    "he_normal_init", "sigmoid",
]
