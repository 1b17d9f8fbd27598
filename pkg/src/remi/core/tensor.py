"""Dense float64 tensors with tape-free reverse-mode differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and
a closure mapping the upstream gradient to one gradient per parent.
:meth:`Tensor.backward` walks the graph in reverse topological order.
Only first-order derivatives are supported.
"""

from __future__ import annotations

import numpy as np

from remi.errors import DimensionError, NumericError, StateError

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "ctx")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.ctx = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable node.

        Leaves that require gradients accumulate across calls; call
        :meth:`zero_grad` between steps.
        """
        if self._backward is None:
            raise StateError("backward() called on a tensor with no recorded forward graph")
        if grad is None:
            if self.data.size != 1:
                raise StateError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)

        order = _topological_order(self)
        pending = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in order:
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (),
                  _backward=backward if needs else None)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def check_finite(x, what="tensor"):
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


# elementwise ---------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward)


def relu(x):
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _make(x.data * mask, (x,), backward)


def log(x):
    def backward(g):
        return (g / x.data,)

    return _make(np.log(x.data), (x,), backward)


def clamp_min(x, lo):
    """max(x, lo); gradient is zero where the floor is active."""
    mask = x.data >= lo

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, lo), (x,), backward)


# reductions and reshaping ----------------------------------------------------

def sum_(x, axis=None):
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(x.data.sum(axis=axis), (x,), backward)


def mean(x, axis=None):
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis), 1.0 / n)


def reshape(x, shape):
    def backward(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), (x,), backward)


def concat(parts, axis=1):
    parts = [as_tensor(p) for p in parts]
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward)


def pick(x, index):
    """Row-wise gather: out[i] = x[i, index[i]] for a 2-D ``x``."""
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(x.shape[0])

    def backward(g):
        out = np.zeros_like(x.data)
        out[rows, index] = g
        return (out,)

    return _make(x.data[rows, index], (x,), backward)


def column(x, j):
    def backward(g):
        out = np.zeros_like(x.data)
        out[:, j] = g
        return (out,)

    return _make(x.data[:, j], (x,), backward)


# linear algebra --------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not compose")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), backward)


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward)


# convolution and pooling (NCHW) ---------------------------------------------

def _im2col(xp, k, stride, oh, ow):
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k, k, oh, ow), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols


def conv2d(x, w, stride=1, padding=0):
    """Cross-correlation of ``x`` (B,C,H,W) with ``w`` (O,C,k,k), no bias.

    The im2col buffer is kept on ``out.ctx`` so per-sample weight gradients
    can be formed later without another pass.
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d input {x.shape} incompatible with kernel {w.shape}")
    k = w.shape[2]
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    oh = (xp.shape[2] - k) // stride + 1
    ow = (xp.shape[3] - k) // stride + 1
    if oh < 1 or ow < 1:
        raise DimensionError(f"kernel {k} larger than padded input {xp.shape[2:]}")
    cols = _im2col(xp, k, stride, oh, ow)
    out_data = np.tensordot(cols, w.data, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)

    def backward(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        gx = None
        if x.requires_grad:
            gcols = np.tensordot(g, w.data, axes=([1], [0]))  # B,oh,ow,C,k,k
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + x.shape[2], padding:padding + x.shape[3]] if padding else gxp
        return gx, gw

    out = _make(out_data, (x, w), backward)
    out.ctx = cols
    return out


def maxpool2d(x, k, stride):
    b, c, h, w = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    if oh < 1 or ow < 1:
        raise DimensionError(f"pool window {k} larger than input {(h, w)}")
    windows = _im2col(x.data, k, stride, oh, ow)  # B,C,k,k,oh,ow
    flat = windows.reshape(b, c, k * k, oh, ow)
    arg = flat.argmax(axis=2)  # first maximum wins ties
    out_data = np.take_along_axis(flat, arg[:, :, None], axis=2)[:, :, 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        di, dj = np.divmod(arg, k)
        bi, ci, oi, oj = np.indices(arg.shape)
        np.add.at(gx, (bi, ci, oi * stride + di, oj * stride + dj), g)
        return (gx,)

    return _make(out_data, (x,), backward)
