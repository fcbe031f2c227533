"""Minimal reverse-mode differentiation engine (numpy, NCHW layout)."""

from .graph import Graph, Parameter, ParameterStore
from .layers import (
    Concat,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    L2Distance,
    MaxPool2D,
    ReLU,
    Sigmoid,
    Softmax,
    conv2d,
    conv2d_backward,
)
from .losses import (
    bce_grad,
    bce_loss,
    cce_grad,
    cce_loss,
    contrastive_grad,
    contrastive_loss,
)
from .optim import Adam, NonFiniteGradientError, maxnorm_project
from .gradcheck import grad_check
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "Adam",
    "Concat",
    "Conv2D",
    "Dense",
    "Dropout",
    "Flatten",
    "Graph",
    "L2Distance",
    "MaxPool2D",
    "NonFiniteGradientError",
    "Parameter",
    "ParameterStore",
    "ReLU",
    "Sigmoid",
    "Softmax",
    "bce_grad",
    "bce_loss",
    "cce_grad",
    "cce_loss",
    "contrastive_grad",
    "contrastive_loss",
    "conv2d",
    "conv2d_backward",
    "grad_check",
    "load_checkpoint",
    "maxnorm_project",
    "save_checkpoint",
]
