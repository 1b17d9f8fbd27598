"""Membership classifiers G(.) and Gaussian summaries of their outputs."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from remi.core import checkpoint
from remi.core import tensor as T
from remi.core.tensor import Tensor
from remi.errors import InputError
from remi.features import FeatureSpec
from remi.models import mlp
from remi.training import TrainConfig, fit

VARIANTS = ("MIA", "MF")
SIGMA_MIN = 1e-6
# loss and gradient-norm inputs are mapped through log(x + LOG_FLOOR) before
# standardization; memorized samples have losses far below float resolution of 1
LOG_FLOOR = 1e-300
MIN_PER_CLASS = 20


def default_attack_config():
    return TrainConfig(epochs=60, batch_size=32, lr=0.05, momentum=0.9, weight_decay=0.0, seed=0)


@dataclass
class PrivacyModel:
    net: object
    spec: FeatureSpec
    variant: str
    access: str
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    log_mask: np.ndarray
    heldout_accuracy: float = float("nan")
    heldout_nonmember_rate: float = float("nan")
    warnings: list = field(default_factory=list)

    def standardize(self, features):
        x = np.asarray(features, dtype=np.float64)
        x = np.where(self.log_mask, np.log(np.maximum(x, 0.0) + LOG_FLOOR), x)
        return (x - self.feature_mean) / self.feature_scale

    def prob(self, features):
        """Membership probability per row of ``features``."""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.feature_mean.size:
            raise InputError(f"expected (n, {self.feature_mean.size}) features, got {features.shape}")
        if features.shape[0] == 0:
            return np.zeros(0)
        return self.net.predict_proba(self.standardize(features))[:, 1]

    def prob_tensor(self, features):
        """Differentiable membership probability; gradients flow into ``features`` only."""
        m = self.log_mask.astype(np.float64)
        logged = T.log(T.add(T.relu(features), LOG_FLOOR))
        x = T.add(T.mul(features, Tensor(1.0 - m)), T.mul(logged, Tensor(m)))
        z = T.mul(T.sub(x, Tensor(self.feature_mean)), Tensor(1.0 / self.feature_scale))
        return T.column(self.net.forward(z), 1)

    def save(self, path):
        path = Path(path)
        checkpoint.save(self.net, path)
        meta = {
            "variant": self.variant,
            "access": self.access,
            "spec": self.spec.to_dict(),
            "feature_mean": self.feature_mean.tolist(),
            "feature_scale": self.feature_scale.tolist(),
            "log_mask": self.log_mask.tolist(),
            "heldout_accuracy": self.heldout_accuracy,
            "heldout_nonmember_rate": self.heldout_nonmember_rate,
            "warnings": self.warnings,
        }
        path.with_suffix(".json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        return cls(checkpoint.load(path), FeatureSpec.from_dict(meta["spec"]), meta["variant"], meta["access"],
                   np.array(meta["feature_mean"]), np.array(meta["feature_scale"]),
                   np.array(meta["log_mask"], dtype=bool),
                   meta["heldout_accuracy"], meta["heldout_nonmember_rate"], meta["warnings"])


def attack_prob(g, features):
    return g.prob(features)


def member_rate(probs):
    """Fraction of samples flagged as members (prob > 0.5)."""
    probs = np.asarray(probs)
    return float((probs > 0.5).mean()) if probs.size else float("nan")


def attack_accuracy(probs, z):
    probs, z = np.asarray(probs), np.asarray(z)
    return float(((probs > 0.5).astype(np.int64) == z).mean())


def _stratified_holdout(z, fraction, seed):
    rng = np.random.default_rng(seed)
    held = []
    for label in (0, 1):
        idx = np.flatnonzero(z == label)
        idx = idx[rng.permutation(idx.size)]
        held.append(idx[:int(round(fraction * idx.size))])
    held = np.sort(np.concatenate(held))
    train = np.setdiff1d(np.arange(z.size), held)
    return train, held


def train_privacy_model(dataset, cfg=None, variant="MF", heldout_fraction=0.2, hidden=(64, 32)):
    """Fit a binary membership MLP on an attack dataset.

    A stratified ``heldout_fraction`` of the records is kept aside to report
    held-out accuracy and the member-flag rate on held-out nonmembers.
    """
    if variant not in VARIANTS:
        raise InputError(f"variant must be one of {VARIANTS}")
    cfg = cfg or default_attack_config()
    z = np.asarray(dataset.z)
    counts = np.bincount(z, minlength=2)
    if counts.min() < MIN_PER_CLASS:
        raise InputError(f"need >= {MIN_PER_CLASS} records per membership class, have {counts.tolist()}")
    if counts[0] != counts[1]:
        raise InputError("attack records must be balanced")
    train_idx, held_idx = _stratified_holdout(z, heldout_fraction, cfg.seed)
    log_mask = dataset.spec.scaled_columns(dataset.num_classes, dataset.features.shape[1])
    raw = dataset.features
    X = np.where(log_mask, np.log(np.maximum(raw, 0.0) + LOG_FLOOR), raw)
    mean = X[train_idx].mean(axis=0)
    scale = X[train_idx].std(axis=0)
    warnings = []
    flat = scale < 1e-12
    if flat.all():
        warnings.append("degenerate features: zero variance in every column")
    scale = np.where(flat, 1.0, scale)
    net = mlp(X.shape[1], 2, seed=cfg.seed, hidden=hidden)
    Xs = (X - mean) / scale
    net, _ = fit(net, Xs[train_idx], z[train_idx], Xs[held_idx], z[held_idx], cfg)
    g = PrivacyModel(net, dataset.spec, variant, dataset.spec.access, mean, scale, log_mask, warnings=warnings)
    if held_idx.size:
        p = g.prob(raw[held_idx])
        g.heldout_accuracy = attack_accuracy(p, z[held_idx])
        g.heldout_nonmember_rate = member_rate(p[z[held_idx] == 0])
    return g


# Gaussian summaries ------------------------------------------------------------

@dataclass(frozen=True)
class GaussianFit:
    mu: float
    sigma: float
    n: int = 2

    def __post_init__(self):
        if not self.sigma > 0:
            raise InputError("sigma must be positive")


def fit_gaussian(probs):
    """Sample mean and (ddof=1) standard deviation, floored at SIGMA_MIN."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size < 2:
        raise InputError("fit_gaussian needs at least two values")
    return GaussianFit(float(probs.mean()), max(float(probs.std(ddof=1)), SIGMA_MIN), int(probs.size))


def pooled_sigma(p, q):
    dof = p.n + q.n - 2
    return math.sqrt(((p.n - 1) * p.sigma ** 2 + (q.n - 1) * q.sigma ** 2) / dof)


def kl_gaussian_shared(p, q):
    """KL between N(mu_p, s^2) and N(mu_q, s^2) with s the pooled standard deviation."""
    s = pooled_sigma(p, q)
    return (p.mu - q.mu) ** 2 / (2.0 * s * s)


def kl_gaussian(p, q):
    """Closed-form KL(N(mu_p, sigma_p^2) || N(mu_q, sigma_q^2))."""
    return (math.log(q.sigma / p.sigma)
            + (p.sigma ** 2 + (p.mu - q.mu) ** 2) / (2.0 * q.sigma ** 2) - 0.5)
