"""Minimal deterministic neural-network engine."""

from remi.core.nn import (
    EPS,
    Conv2d,
    Dense,
    Flatten,
    MaxPool2d,
    Network,
    ReLU,
    Softmax,
    cross_entropy,
    nll,
)
from remi.core.optim import SGD
from remi.core.tensor import Tensor

__all__ = [
    "EPS", "Conv2d", "Dense", "Flatten", "MaxPool2d", "Network", "ReLU", "SGD",
    "Softmax", "Tensor", "cross_entropy", "nll",
]
