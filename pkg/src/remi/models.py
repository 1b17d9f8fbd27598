"""Architecture factory used by every pipeline stage."""

import math

from remi.core.nn import Conv2d, Dense, Flatten, MaxPool2d, Network, ReLU, Softmax
from remi.errors import InputError

ARCHITECTURES = ("cnn", "mlp")


def small_cnn(image_shape, num_classes, seed=0, channels=(8, 16, 16), hidden=64):
    """Three conv/relu/maxpool blocks followed by two dense layers."""
    c, h, w = image_shape
    layers = []
    for out_c in channels:
        layers += [Conv2d(c, out_c, 3, padding=1), ReLU(), MaxPool2d(2)]
        c, h, w = out_c, h // 2, w // 2
    if h < 1 or w < 1:
        raise InputError(f"image {image_shape} too small for {len(channels)} pooling stages")
    layers += [Flatten(), Dense(c * h * w, hidden), ReLU(), Dense(hidden, num_classes), Softmax()]
    return Network(layers, image_shape, seed=seed)


def mlp(input_dim, num_classes, seed=0, hidden=(64, 32)):
    layers, d = [], input_dim
    for width in hidden:
        layers += [Dense(d, width), ReLU()]
        d = width
    layers += [Dense(d, num_classes), Softmax()]
    return Network(layers, (input_dim,), seed=seed)


def image_shape_for(dim):
    side = math.isqrt(dim)
    if side * side != dim:
        raise InputError(f"cannot view {dim} features as a square image")
    return (1, side, side)


def build(arch, input_dim, num_classes, seed=0, image_shape=None, **kwargs):
    if arch == "cnn":
        return small_cnn(image_shape or image_shape_for(input_dim), num_classes, seed=seed, **kwargs)
    if arch == "mlp":
        return mlp(input_dim, num_classes, seed=seed, **kwargs)
    raise InputError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")
