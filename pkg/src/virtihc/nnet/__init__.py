from .layers import (
    BatchNorm,
    Conv2D,
    ConvTranspose2D,
    Dense,
    Flatten,
    Layer,
    LeakyReLU,
    Parameter,
    ReLU,
    Sequential,
    Sigmoid,
    Tanh,
)
from .optim import Adam, AdamState, LrSchedule, adam_step, cosine_lr

__all__ = [
    "Adam",
    "AdamState",
    "BatchNorm",
    "Conv2D",
    "ConvTranspose2D",
    "Dense",
    "Flatten",
    "Layer",
    "LeakyReLU",
    "LrSchedule",
    "Parameter",
    "ReLU",
    "Sequential",
    "Sigmoid",
    "Tanh",
    "adam_step",
    "cosine_lr",
]
