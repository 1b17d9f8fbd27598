"""Shared oracles and tiny fixtures for the test suite."""

import numpy as np

from remi.core import Conv2d, Dense, Flatten, MaxPool2d, Network, ReLU, Softmax, cross_entropy
from remi.datasets import Corpus


def tiny_cnn(seed=1, k=3):
    return Network([Conv2d(1, 3, 3, padding=1), ReLU(), MaxPool2d(2), Flatten(),
                    Dense(3 * 2 * 2, 5), ReLU(), Dense(5, k), Softmax()], (1, 4, 4), seed=seed)


def tiny_mlp(seed=1, d=6, k=3):
    return Network([Dense(d, 5), ReLU(), Dense(5, k), Softmax()], (d,), seed=seed)


def finite_difference(net, loss_fn, h=1e-4):
    """Central differences of loss_fn(net) w.r.t. every flat parameter."""
    w0 = net.get_flat()
    fd = np.zeros_like(w0)
    for i in range(w0.size):
        w = w0.copy()
        w[i] += h
        net.set_flat(w)
        lp = loss_fn(net)
        w[i] -= 2 * h
        net.set_flat(w)
        lm = loss_fn(net)
        fd[i] = (lp - lm) / (2 * h)
    net.set_flat(w0)
    return fd


def gradcheck(net, X, y):
    """Max per-parameter relative error |autodiff - fd| / (|fd| + 1e-8)."""
    grad = net.backward(cross_entropy(net.forward(X), y))
    fd = finite_difference(net, lambda n: cross_entropy(n.forward(X), y).item())
    return float(np.max(np.abs(grad - fd) / (np.abs(fd) + 1e-8)))


def per_sample_grads_bruteforce(net, X, y):
    """Explicit loop: one backward pass per sample, returning (B, P) flat gradients."""
    rows = []
    for i in range(len(y)):
        rows.append(net.backward(cross_entropy(net.forward(X[i:i + 1]), y[i:i + 1])).copy())
    net.zero_grad()
    return np.stack(rows)


def small_corpus(n_per_class=20, k=2, dim=16, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.tile(np.arange(k), n_per_class)
    samples = rng.normal(size=(labels.size, dim)) + 3.0 * np.eye(k, dim)[labels]
    side = int(np.sqrt(dim))
    shape = (1, side, side) if side * side == dim else None
    return Corpus(samples, labels, k, name="tiny", image_shape=shape)
