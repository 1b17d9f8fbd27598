"""Little-endian binary checkpoints.

Layout::

    b"REMI"  u32 version  u64 seed
    u32 ndim  u32[ndim] input_shape
    u32 n_layers  then per layer: u8 kind, u8 n_hyper, i64[n_hyper] hyper
    u64 n_params  f64[n_params]   (parameter tensors in declaration order)
"""

import struct
from pathlib import Path

import numpy as np

from remi.core.nn import Network, make_layer
from remi.errors import FormatError

MAGIC = b"REMI"
VERSION = 1
KIND_CODES = {"dense": 1, "conv2d": 2, "relu": 3, "maxpool2d": 4, "flatten": 5, "softmax": 6}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}


def dumps(net):
    parts = [MAGIC, struct.pack("<IQ", VERSION, net.rng_seed)]
    parts.append(struct.pack("<I", len(net.input_shape)))
    parts.append(struct.pack(f"<{len(net.input_shape)}I", *net.input_shape))
    parts.append(struct.pack("<I", len(net.layers)))
    for layer in net.layers:
        hyper = layer.hyper
        parts.append(struct.pack("<BB", KIND_CODES[layer.kind], len(hyper)))
        parts.append(struct.pack(f"<{len(hyper)}q", *hyper))
    flat = net.get_flat()
    parts.append(struct.pack("<Q", flat.size))
    parts.append(flat.astype("<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise FormatError("checkpoint truncated")
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return out


def loads(buf):
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("not a REMI checkpoint (bad magic)")
    r = _Reader(buf)
    r.pos = 4
    version, seed = r.take("<IQ")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (ndim,) = r.take("<I")
    input_shape = r.take(f"<{ndim}I")
    (n_layers,) = r.take("<I")
    layers = []
    for _ in range(n_layers):
        code, n_hyper = r.take("<BB")
        if code not in KIND_NAMES:
            raise FormatError(f"unknown layer kind code {code}")
        hyper = r.take(f"<{n_hyper}q")
        layers.append(make_layer(KIND_NAMES[code], hyper))
    net = Network(layers, input_shape, seed=seed)
    (n_params,) = r.take("<Q")
    if n_params != net.param_count:
        raise FormatError(f"checkpoint holds {n_params} parameters, architecture needs {net.param_count}")
    end = r.pos + 8 * n_params
    if end > len(buf):
        raise FormatError("checkpoint truncated")
    if end != len(buf):
        raise FormatError("trailing bytes after checkpoint payload")
    net.set_flat(np.frombuffer(buf, dtype="<f8", count=n_params, offset=r.pos))
    return net


def save(net, path):
    Path(path).write_bytes(dumps(net))


def load(path):
    return loads(Path(path).read_bytes())
