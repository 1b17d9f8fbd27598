"""Corpus loading, the four-way split, and forget-set curation."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from remi.errors import FormatError, InputError

SPLIT_NAMES = ("target_train", "target_test", "shadow_in", "shadow_out")


@dataclass
class Corpus:
    samples: np.ndarray  # (N, input_dim) float64
    labels: np.ndarray  # (N,) int64
    num_classes: int
    name: str = "corpus"
    image_shape: tuple | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 2 or self.samples.shape[0] != self.labels.shape[0]:
            raise InputError("samples must be (N, d) and match the label count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def input_dim(self):
        return self.samples.shape[1]

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return self.samples[idx], self.labels[idx]

    def validate_for_split(self):
        if len(self) < 4 * self.num_classes:
            raise InputError(f"need at least 4*K={4 * self.num_classes} samples, have {len(self)}")


# loaders ---------------------------------------------------------------------

_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path):
    """Parse an IDX file into an ndarray (big-endian header: 0,0,type,ndim)."""
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise FormatError(f"{path}: malformed IDX header")
    zero, dtype_code, ndim = struct.unpack(">HBB", buf[:4])
    if zero != 0 or dtype_code not in _IDX_DTYPES or ndim == 0:
        raise FormatError(f"{path}: malformed IDX header")
    if len(buf) < 4 + 4 * ndim:
        raise FormatError(f"{path}: truncated IDX dimensions")
    dims = struct.unpack(f">{ndim}I", buf[4:4 + 4 * ndim])
    dtype = np.dtype(_IDX_DTYPES[dtype_code])
    count = int(np.prod(dims))
    payload = buf[4 + 4 * ndim:]
    if len(payload) != count * dtype.itemsize:
        raise FormatError(f"{path}: payload holds {len(payload)} bytes, header implies {count * dtype.itemsize}")
    return np.frombuffer(payload, dtype=dtype, count=count).reshape(dims)


def _resize(images, side):
    n, h, w = images.shape
    if (h, w) == (side, side):
        return images
    zoomed = ndimage.zoom(images, (1, side / h, side / w), order=1)
    return np.clip(zoomed, 0.0, 1.0)


def load_idx(images_path, labels_path, num_classes=None, side=None, name=None):
    """Load an IDX image/label pair (MNIST / Fashion-MNIST layout).

    Pixels are rescaled to [0, 1]; ``side`` optionally resizes every image
    to ``side x side`` with bilinear interpolation.
    """
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise FormatError(f"{images_path}: expected a 3-D image tensor, got {images.ndim}-D")
    if labels.ndim != 1:
        raise FormatError(f"{labels_path}: expected a 1-D label vector")
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    imgs = images.astype(np.float64)
    if images.dtype == np.uint8:
        imgs /= 255.0
    else:
        lo, hi = imgs.min(), imgs.max()
        imgs = (imgs - lo) / (hi - lo) if hi > lo else np.zeros_like(imgs)
    if side:
        imgs = _resize(imgs, int(side))
    k = int(num_classes) if num_classes else int(labels.max()) + 1
    n, h, w = imgs.shape
    return Corpus(imgs.reshape(n, h * w), labels.astype(np.int64), k,
                  name=name or Path(images_path).stem, image_shape=(1, h, w))


def load_csv(path, num_classes=None, label_column="label", image_shape=None, name=None):
    """Read a header-row CSV with an integer ``label`` column; other columns are features."""
    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(fh) if row and not row[0].startswith("#")]
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    header, body = rows[0], rows[1:]
    if label_column not in header:
        raise FormatError(f"{path}: no {label_column!r} column")
    li = header.index(label_column)
    try:
        data = np.array([[float(v) for v in row] for row in body], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric cell ({exc})") from None
    if data.ndim != 2 or data.shape[1] != len(header):
        raise FormatError(f"{path}: ragged rows")
    labels = data[:, li]
    if np.any(labels != np.round(labels)):
        raise InputError(f"{path}: labels must be integers")
    labels = labels.astype(np.int64)
    features = np.delete(data, li, axis=1)
    k = int(num_classes) if num_classes else int(labels.max()) + 1
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"{path}: label outside [0, {k})")
    return Corpus(features, labels, k, name=name or Path(path).stem,
                  image_shape=tuple(image_shape) if image_shape else None)


def save_csv(corpus, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(corpus.input_dim)] + ["label"])
        for x, y in zip(corpus.samples, corpus.labels):
            writer.writerow([repr(float(v)) for v in x] + [int(y)])


def make_synthetic(num_classes, per_class, dim, seed, sigma=1.0, mean_distance=6.0, smoothing=0.0,
                   name="synthetic"):
    """Gaussian blobs with pairwise class-mean distance exactly ``mean_distance``.

    Class means are ``mean_distance / sqrt(2)`` times orthonormal directions
    drawn from ``seed``; each sample adds ``sigma``-scaled standard noise.
    With ``smoothing > 0`` and a perfect-square ``dim`` the directions are
    orthonormalized Gaussian-smoothed random images of that width, giving the
    means spatial structure.
    Samples are interleaved by class (row i has label ``i % K``).
    """
    if num_classes < 2:
        raise InputError("need at least two classes")
    if dim < num_classes:
        raise InputError("dim must be at least the number of classes")
    rng = np.random.default_rng(seed)
    side = int(round(np.sqrt(dim)))
    square = side * side == dim
    raw = rng.standard_normal((num_classes, dim))
    if square and smoothing > 0:
        raw = np.stack([ndimage.gaussian_filter(r.reshape(side, side), float(smoothing), mode="wrap").ravel()
                        for r in raw])
    q, _ = np.linalg.qr(raw.T)
    means = (mean_distance / np.sqrt(2.0)) * q.T
    labels = np.tile(np.arange(num_classes), per_class)
    noise = rng.standard_normal((labels.size, dim))
    samples = means[labels] + sigma * noise
    image_shape = (1, side, side) if square else None
    return Corpus(samples, labels, num_classes, name=name, image_shape=image_shape)


# splitting ---------------------------------------------------------------------

@dataclass
class SplitPlan:
    target_train: np.ndarray
    target_test: np.ndarray
    shadow_in: np.ndarray
    shadow_out: np.ndarray
    seed: int

    def __post_init__(self):
        for name in SPLIT_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        joined = np.concatenate([getattr(self, n) for n in SPLIT_NAMES])
        if np.unique(joined).size != joined.size:
            raise InputError("split index lists overlap")

    @property
    def out_of_sample(self):
        return self.target_test

    def to_dict(self):
        return {"seed": self.seed, **{n: getattr(self, n).tolist() for n in SPLIT_NAMES}}

    @classmethod
    def from_dict(cls, d):
        return cls(**{n: d[n] for n in SPLIT_NAMES}, seed=d["seed"])

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def split(corpus, seed):
    """Stratified four-way split into equal quarters; remainder samples are dropped."""
    corpus.validate_for_split()
    rng = np.random.default_rng(seed)
    parts = [[] for _ in SPLIT_NAMES]
    for c in range(corpus.num_classes):
        idx = np.flatnonzero(corpus.labels == c)
        idx = idx[rng.permutation(idx.size)]
        q = idx.size // 4
        if q == 0:
            raise InputError(f"class {c} has fewer than 4 samples")
        for j in range(4):
            parts[j].append(idx[j * q:(j + 1) * q])
    lists = [np.sort(np.concatenate(p)) for p in parts]
    return SplitPlan(*lists, seed=int(seed))


# forget-set selection ------------------------------------------------------------

@dataclass
class ForgetSet:
    indices: np.ndarray
    ratio: float
    selection_scores: np.ndarray = field(default=None)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.selection_scores is not None:
            self.selection_scores = np.asarray(self.selection_scores, dtype=np.float64)

    def __len__(self):
        return self.indices.size

    def remainder(self, plan):
        """D_r = target_train minus the forget set."""
        return np.setdiff1d(plan.target_train, self.indices)

    def to_dict(self):
        scores = None if self.selection_scores is None else [float(s) for s in self.selection_scores]
        return {"ratio": self.ratio, "indices": self.indices.tolist(), "selection_scores": scores}

    @classmethod
    def from_dict(cls, d):
        return cls(d["indices"], d["ratio"], d.get("selection_scores"))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def class_quotas(total, num_classes):
    """Spread ``total`` over classes: floor share each, remainder to the lowest ids."""
    base, extra = divmod(int(total), num_classes)
    return [base + (1 if c < extra else 0) for c in range(num_classes)]


def select_forget_set(plan, labels, mf_probs, ratio):
    """Pick the highest-MF-probability training samples, evenly per class.

    ``mf_probs`` is aligned with ``plan.target_train``.  Ties resolve to the
    lower corpus index.
    """
    if not 0.0 < ratio < 1.0:
        raise InputError("ratio must lie in (0, 1)")
    train = plan.target_train
    mf_probs = np.asarray(mf_probs, dtype=np.float64)
    if mf_probs.shape != train.shape:
        raise InputError("mf_probs must align with target_train")
    train_labels = np.asarray(labels)[train]
    classes = np.unique(train_labels)
    quotas = class_quotas(round(ratio * train.size), classes.size)
    chosen, scores = [], []
    for c, quota in zip(classes, quotas):
        if quota == 0:
            raise InputError(f"ratio {ratio} yields no forget samples for class {c}")
        members = np.flatnonzero(train_labels == c)
        if quota > members.size:
            raise InputError(f"class {c} has only {members.size} training samples, quota {quota}")
        order = np.lexsort((train[members], -mf_probs[members]))
        pick = members[order[:quota]]
        chosen.append(train[pick])
        scores.append(mf_probs[pick])
    indices = np.concatenate(chosen)
    sel = np.concatenate(scores)
    order = np.argsort(indices, kind="stable")
    return ForgetSet(indices[order], float(ratio), sel[order])
