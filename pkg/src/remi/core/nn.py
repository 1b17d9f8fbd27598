"""Layers, the sequential :class:`Network`, and the cross-entropy loss."""

from __future__ import annotations

import copy
import math

import numpy as np

from remi.core import tensor as T
from remi.core.tensor import Tensor
from remi.errors import DimensionError, InputError, NumericError

#: clamp applied inside every log of a probability
EPS = 1e-12


class Layer:
    kind = ""
    params: list

    def __init__(self):
        self.params = []
        # (input data or im2col buffer, pre-activation output node) of the last forward
        self.trace = None

    @property
    def hyper(self):
        return ()

    def output_shape(self, input_shape):
        return tuple(input_shape)

    def init(self, rng):
        pass

    def forward(self, x):
        raise NotImplementedError

    def __repr__(self):
        args = ", ".join(str(h) for h in self.hyper)
        return f"{type(self).__name__}({args})"


def _glorot(rng, shape, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, out_features):
        super().__init__()
        self.in_features, self.out_features = int(in_features), int(out_features)
        self.weight = Tensor(np.zeros((self.in_features, self.out_features)), requires_grad=True)
        self.bias = Tensor(np.zeros(self.out_features), requires_grad=True)
        self.params = [self.weight, self.bias]

    @property
    def hyper(self):
        return (self.in_features, self.out_features)

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.in_features,):
            raise DimensionError(f"dense expects ({self.in_features},), got {tuple(input_shape)}")
        return (self.out_features,)

    def init(self, rng):
        self.weight.data = _glorot(rng, self.weight.shape, self.in_features, self.out_features)
        self.bias.data = np.zeros(self.out_features)

    def forward(self, x):
        out = T.add(T.matmul(x, self.weight), self.bias)
        self.trace = (x.data, out)
        return out

    def per_sample_grad_sq(self):
        """Squared L2 norm of each sample's (weight, bias) gradient."""
        x, out = self.trace
        delta = out.grad
        d2 = np.einsum("bi,bi->b", delta, delta)
        return np.einsum("bi,bi->b", x, x) * d2 + d2


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0):
        super().__init__()
        self.in_channels, self.out_channels = int(in_channels), int(out_channels)
        self.kernel, self.stride, self.padding = int(kernel), int(stride), int(padding)
        k = self.kernel
        self.weight = Tensor(np.zeros((self.out_channels, self.in_channels, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(self.out_channels), requires_grad=True)
        self.params = [self.weight, self.bias]

    @property
    def hyper(self):
        return (self.in_channels, self.out_channels, self.kernel, self.stride, self.padding)

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            raise DimensionError(f"conv2d expects ({self.in_channels}, H, W), got {tuple(input_shape)}")
        _, h, w = input_shape
        oh = (h + 2 * self.padding - self.kernel) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if oh < 1 or ow < 1:
            raise DimensionError(f"conv2d kernel {self.kernel} does not fit input {tuple(input_shape)}")
        return (self.out_channels, oh, ow)

    def init(self, rng):
        kk = self.kernel * self.kernel
        self.weight.data = _glorot(rng, self.weight.shape, self.in_channels * kk, self.out_channels * kk)
        self.bias.data = np.zeros(self.out_channels)

    def forward(self, x):
        z = T.conv2d(x, self.weight, self.stride, self.padding)
        out = T.add(z, T.reshape(self.bias, (1, self.out_channels, 1, 1)))
        self.trace = (z.ctx, out)
        return out

    def per_sample_grad_sq(self):
        cols, out = self.trace
        delta = out.grad
        gw = np.einsum("bohw,bcijhw->bocij", delta, cols)
        gb = delta.sum(axis=(2, 3))
        return np.einsum("bocij,bocij->b", gw, gw) + np.einsum("bo,bo->b", gb, gb)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        return T.relu(x)


class MaxPool2d(Layer):
    kind = "maxpool2d"

    def __init__(self, kernel, stride=None):
        super().__init__()
        self.kernel = int(kernel)
        self.stride = int(stride if stride is not None else kernel)

    @property
    def hyper(self):
        return (self.kernel, self.stride)

    def output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise DimensionError(f"maxpool2d expects (C, H, W), got {tuple(input_shape)}")
        c, h, w = input_shape
        oh = (h - self.kernel) // self.stride + 1
        ow = (w - self.kernel) // self.stride + 1
        if oh < 1 or ow < 1:
            raise DimensionError(f"pool window {self.kernel} does not fit input {tuple(input_shape)}")
        return (c, oh, ow)

    def forward(self, x):
        return T.maxpool2d(x, self.kernel, self.stride)


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x):
        return T.reshape(x, (x.shape[0], -1))


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x):
        return T.softmax(x, axis=-1)


LAYER_TYPES = {cls.kind: cls for cls in (Dense, Conv2d, ReLU, MaxPool2d, Flatten, Softmax)}


def make_layer(kind, hyper=()):
    try:
        cls = LAYER_TYPES[kind]
    except KeyError:
        raise InputError(f"unknown layer kind {kind!r}") from None
    return cls(*hyper)


class Network:
    """Ordered layer stack ending in a softmax.

    ``input_shape`` excludes the batch axis; batches may be passed flat
    (B, prod(input_shape)) and are reshaped on entry.
    """

    def __init__(self, layers, input_shape, seed=0):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.rng_seed = int(seed)
        if not self.layers or not isinstance(self.layers[-1], Softmax):
            raise InputError("the final layer of a Network must be Softmax")
        shape = self.input_shape
        self.shapes = [shape]
        for layer in self.layers:
            shape = layer.output_shape(shape)
            self.shapes.append(shape)
        if len(shape) != 1:
            raise DimensionError(f"network output must be a vector, got {shape}")
        self.num_outputs = shape[0]
        rng = np.random.default_rng(self.rng_seed)
        for layer in self.layers:
            layer.init(rng)

    @property
    def params(self):
        return [p for layer in self.layers for p in layer.params]

    @property
    def param_layers(self):
        return [layer for layer in self.layers if layer.params]

    @property
    def param_count(self):
        return sum(p.size for p in self.params)

    @property
    def input_dim(self):
        return int(np.prod(self.input_shape))

    def _prepare(self, batch):
        # graph inputs stay connected so gradients can flow back through the network
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=np.float64))
        if x.data.ndim == 1:
            x = T.reshape(x, (1, -1))
        if x.shape[1:] != self.input_shape:
            if x.data.ndim == 2 and x.shape[1] == self.input_dim:
                x = T.reshape(x, (x.shape[0],) + self.input_shape)
            else:
                raise DimensionError(f"batch shape {x.shape} does not match network input {self.input_shape}")
        if not np.all(np.isfinite(x.data)):
            raise NumericError("non-finite values in network input")
        return x

    def forward(self, batch):
        """Class probabilities (B, K) as a graph node."""
        x = self._prepare(batch)
        for layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def predict_proba(self, batch, chunk=1024):
        x = batch.data if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float64)
        if x.shape[0] <= chunk:
            return self.forward(x).data
        return np.concatenate([self.forward(x[i:i + chunk]).data for i in range(0, x.shape[0], chunk)])

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def backward(self, loss):
        """Fill ``.grad`` of every parameter and return the flat gradient."""
        self.zero_grad()
        loss.backward()
        return self.flat_grad()

    def flat_grad(self):
        return np.concatenate([(p.grad if p.grad is not None else np.zeros_like(p.data)).ravel()
                               for p in self.params]) if self.params else np.zeros(0)

    def get_flat(self):
        return np.concatenate([p.data.ravel() for p in self.params]) if self.params else np.zeros(0)

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.param_count,):
            raise DimensionError(f"expected {self.param_count} parameters, got {flat.shape}")
        offset = 0
        for p in self.params:
            n = p.size
            p.data = flat[offset:offset + n].reshape(p.shape).copy()
            offset += n

    def copy(self):
        clone = copy.copy(self)
        clone.layers = [copy.copy(layer) for layer in self.layers]
        for layer in clone.layers:
            layer.trace = None
            layer.params = [Tensor(p.data.copy(), requires_grad=True) for p in layer.params]
            if layer.params:
                layer.weight, layer.bias = layer.params
        return clone

    def __repr__(self):
        body = ", ".join(repr(layer) for layer in self.layers)
        return f"Network(input={self.input_shape}, [{body}])"


def cross_entropy(probs, labels):
    """Mean negative log-likelihood of ``labels`` under row-probabilities ``probs``."""
    per_sample = nll(probs, labels)
    return T.mean(per_sample)


def nll(probs, labels):
    """Per-sample negative log-likelihood ``-log p[y]`` as a (B,) graph node.

    Confident rows (p[y] > 0.5) use ``-log1p(-q)`` with q the summed
    off-label mass, which stays accurate when p[y] rounds to 1.  Other rows
    clamp p[y] at EPS.  Both branches have the same gradient modulo the
    all-ones direction, which the softmax Jacobian annihilates.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if probs.data.ndim != 2 or labels.shape != (probs.shape[0],):
        raise DimensionError(f"probs {probs.shape} and labels {labels.shape} do not align")
    k = probs.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"labels must lie in [0, {k})")
    p = probs.data
    rows = np.arange(p.shape[0])
    onehot = np.zeros_like(p, dtype=bool)
    onehot[rows, labels] = True
    py = p[rows, labels]
    q = np.where(onehot, 0.0, p).sum(axis=1)
    confident = py > 0.5
    with np.errstate(divide="ignore", invalid="ignore"):
        loss = np.where(confident, -np.log1p(-np.minimum(q, 0.5)), -np.log(np.maximum(py, EPS)))

    def backward(g):
        out = np.zeros_like(p)
        hi = g * confident / (1.0 - np.minimum(q, 0.5))
        out += np.where(onehot, 0.0, hi[:, None])
        lo = np.where(~confident & (py >= EPS), -g / np.maximum(py, EPS), 0.0)
        out[rows, labels] += lo
        return (out,)

    return T._make(loss, (probs,), backward)
