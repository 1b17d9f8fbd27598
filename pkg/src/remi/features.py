"""Attack-feature extraction I(w).

Per-sample layout, blocks in this order when enabled::

    [posterior p (K)] [one-hot predicted label (K)] [loss (1)] [gradient summary (G)]

The gradient summary is either one L2 norm per parametric layer
(``per_layer_norms``) or the full flattened gradient of the last dense layer
(``last_layer_full``).  Gradient features need white-box access.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from remi.core import tensor as T
from remi.core.nn import Dense, nll
from remi.core.tensor import Tensor
from remi.errors import AccessError, InputError

BLOCKS = ("posterior", "pred_label", "loss", "gradient")
GRADIENT_REDUCTIONS = ("per_layer_norms", "last_layer_full")
ACCESS_MODES = ("black_box", "white_box")


def _default_mask():
    # argmax and gradient blocks are stop-gradient constants
    return {"posterior": True, "pred_label": False, "loss": True, "gradient": False}


@dataclass(frozen=True)
class FeatureSpec:
    include_posterior: bool = True
    include_pred_label: bool = True
    include_loss: bool = True
    include_gradient: bool = False
    gradient_reduction: str = "per_layer_norms"
    differentiable_mask: dict = field(default_factory=_default_mask)

    def __post_init__(self):
        if not any(self.enabled(b) for b in BLOCKS):
            raise InputError("FeatureSpec needs at least one feature block")
        if self.gradient_reduction not in GRADIENT_REDUCTIONS:
            raise InputError(f"unknown gradient_reduction {self.gradient_reduction!r}")
        if set(self.differentiable_mask) != set(BLOCKS):
            raise InputError(f"differentiable_mask must name exactly {BLOCKS}")
        if self.differentiable_mask["pred_label"] or self.differentiable_mask["gradient"]:
            raise InputError("pred_label and gradient blocks cannot be differentiable")

    @classmethod
    def black_box(cls):
        return cls()

    @classmethod
    def white_box(cls, gradient_reduction="per_layer_norms"):
        return cls(include_gradient=True, gradient_reduction=gradient_reduction)

    @property
    def access(self):
        return "white_box" if self.include_gradient else "black_box"

    def enabled(self, block):
        return getattr(self, f"include_{block}")

    def block_sizes(self, net):
        k = net.num_outputs
        sizes = {"posterior": k, "pred_label": k, "loss": 1, "gradient": gradient_dim(net, self.gradient_reduction)}
        return {b: sizes[b] for b in BLOCKS if self.enabled(b)}

    def length(self, net):
        return sum(self.block_sizes(net).values())

    def scaled_columns(self, num_classes, n_features):
        """Boolean mask of the loss and gradient columns (heavy-tailed, non-negative)."""
        mask = np.zeros(n_features, dtype=bool)
        start = num_classes * (int(self.include_posterior) + int(self.include_pred_label))
        if self.include_loss or self.include_gradient:
            mask[start:] = True
        return mask

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def gradient_dim(net, reduction="per_layer_norms"):
    if reduction == "per_layer_norms":
        return len(net.param_layers)
    last = net.param_layers[-1]
    if not isinstance(last, Dense):
        raise InputError("last_layer_full needs a dense final parametric layer")
    return last.in_features * last.out_features + last.out_features


def _backward_per_sample(net, X, y):
    probs = net.forward(X)
    total = T.sum_(nll(probs, y))
    net.zero_grad()
    total.backward()
    return probs


def per_layer_grad_sq(net, X, y):
    """(B, L) squared L2 norms of each sample's loss gradient per parametric layer.

    One batched backward pass: every sample's loss depends only on its own
    row, so per-sample gradients are recovered from the stored layer inputs
    and output deltas.
    """
    _backward_per_sample(net, X, y)
    out = np.stack([layer.per_sample_grad_sq() for layer in net.param_layers], axis=1)
    net.zero_grad()
    return out


def last_layer_gradients(net, X, y):
    _backward_per_sample(net, X, y)
    layer = net.param_layers[-1]
    x, node = layer.trace
    delta = node.grad
    gw = np.einsum("bi,bo->bio", x, delta).reshape(x.shape[0], -1)
    net.zero_grad()
    return np.concatenate([gw, delta], axis=1)


def _gradient_block(net, X, y, reduction):
    if reduction == "per_layer_norms":
        return np.sqrt(per_layer_grad_sq(net, X, y))
    return last_layer_gradients(net, X, y)


def _check_access(spec, access):
    if access is None:
        return spec.access
    if access not in ACCESS_MODES:
        raise InputError(f"access must be one of {ACCESS_MODES}")
    if spec.include_gradient and access != "white_box":
        raise AccessError("gradient features require white-box access")
    return access


def extract_features(net, X, y, spec, access=None, chunk=256):
    """Feature matrix (B, F) for samples X with true labels y; never mutates ``net``."""
    _check_access(spec, access)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    out = []
    for s in range(0, len(y), chunk):
        xb, yb = X[s:s + chunk], y[s:s + chunk]
        out.append(feature_tensor(net, xb, yb, spec, differentiable=False).data)
    if not out:
        return np.zeros((0, spec.length(net)))
    return np.concatenate(out, axis=0)


def feature_tensor(net, X, y, spec, differentiable=True, with_probs=False):
    """Features as a graph node; only blocks marked differentiable keep a path to w.

    With ``with_probs`` the class-probability node is returned as well, so a
    caller can reuse the forward pass.
    """
    y = np.asarray(y, dtype=np.int64)
    grad_block = _gradient_block(net, X, y, spec.gradient_reduction) if spec.include_gradient else None
    probs = net.forward(X)
    mask = spec.differentiable_mask if differentiable else dict.fromkeys(BLOCKS, False)
    k = probs.shape[1]
    parts = []
    if spec.include_posterior:
        parts.append(probs if mask["posterior"] else Tensor(probs.data.copy()))
    if spec.include_pred_label:
        parts.append(Tensor(np.eye(k)[probs.data.argmax(axis=1)]))
    if spec.include_loss:
        loss = T.reshape(nll(probs, y), (len(y), 1))
        parts.append(loss if mask["loss"] else Tensor(loss.data.copy()))
    if grad_block is not None:
        parts.append(Tensor(grad_block))
    feats = T.concat(parts, axis=1) if len(parts) > 1 else parts[0]
    return (feats, probs) if with_probs else feats


# records and datasets ----------------------------------------------------------

@dataclass
class AttackFeatureRecord:
    features: np.ndarray
    z: int | None
    source_index: int


@dataclass
class AttackDataset:
    features: np.ndarray  # (n, F)
    z: np.ndarray  # (n,) in {0, 1}
    source_index: np.ndarray  # (n,) corpus rows
    spec: FeatureSpec
    num_classes: int

    def __len__(self):
        return self.z.size

    def __getitem__(self, i):
        return AttackFeatureRecord(self.features[i], int(self.z[i]), int(self.source_index[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            header = {"spec": self.spec.to_dict(), "num_classes": int(self.num_classes)}
            fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
            writer = csv.writer(fh)
            writer.writerow([f"f{i}" for i in range(self.features.shape[1])] + ["z", "source_index"])
            for f, z, s in zip(self.features, self.z, self.source_index):
                writer.writerow([repr(float(v)) for v in f] + [int(z), int(s)])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            first = fh.readline()
            try:
                header = json.loads(first[2:]) if first.startswith("# ") else None
            except json.JSONDecodeError:
                header = None
            if not header or "spec" not in header:
                raise InputError(f"{path}: missing FeatureSpec header")
            spec = FeatureSpec.from_dict(header["spec"])
            rows = list(csv.reader(fh))[1:]
        data = np.array([[float(v) for v in r] for r in rows], dtype=np.float64).reshape(len(rows), -1)
        return cls(data[:, :-2], data[:, -2].astype(np.int64), data[:, -1].astype(np.int64), spec,
                   int(header["num_classes"]))


def extract(net, sample, label, spec, access=None, source_index=-1):
    """Single-sample convenience wrapper returning an unlabeled record."""
    f = extract_features(net, np.asarray(sample)[None], [label], spec, access)[0]
    return AttackFeatureRecord(f, None, source_index)


def build_attack_dataset(net, corpus, member_idx, nonmember_idx, spec, access=None, seed=0):
    """Members get z=1, nonmembers z=0; the larger side is downsampled to balance."""
    member_idx = np.asarray(member_idx, dtype=np.int64)
    nonmember_idx = np.asarray(nonmember_idx, dtype=np.int64)
    if member_idx.size == 0 or nonmember_idx.size == 0:
        raise InputError("attack dataset needs both members and nonmembers")
    if np.intersect1d(member_idx, nonmember_idx).size:
        raise InputError("member and nonmember indices overlap")
    n = min(member_idx.size, nonmember_idx.size)
    rng = np.random.default_rng(seed)
    if member_idx.size > n:
        member_idx = np.sort(rng.choice(member_idx, n, replace=False))
    if nonmember_idx.size > n:
        nonmember_idx = np.sort(rng.choice(nonmember_idx, n, replace=False))
    idx = np.concatenate([member_idx, nonmember_idx])
    X, y = corpus.subset(idx)
    feats = extract_features(net, X, y, spec, access)
    z = np.concatenate([np.ones(n, dtype=np.int64), np.zeros(n, dtype=np.int64)])
    return AttackDataset(feats, z, idx, spec, net.num_outputs)
