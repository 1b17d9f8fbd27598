"""Privacy-guided unlearning and the naive-retraining baseline.

The unlearning objective over the forget set D_f and out-of-sample set D_o is::

    L(w) = lam1 * (CE_{D_f}(w) + CE_{D_o}(w)) + lam2 * -log(1 - mean G(I(w)|D_f) + eps)

with ``lam1 = 1 - lam2`` and G a frozen membership model.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from remi.core import tensor as T
from remi.core.nn import EPS, cross_entropy
from remi.core.optim import SGD
from remi.errors import InputError, NumericError, StallError, StateError
from remi.features import extract_features, feature_tensor
from remi.privacy import member_rate
from remi.training import evaluate, train


@dataclass
class UnlearnConfig:
    lambda2: float = 0.98
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    max_epochs: int = 100
    # None: stop once the D_f member rate is within stop_margin of G's held-out nonmember rate
    stop_threshold: float | None = None
    stop_margin: float = 0.05
    # the stop also waits until D_f's mean attack probability is within this of D_o's (None: off)
    prob_margin: float | None = 0.10
    # ... and until test accuracy is back within this of its starting value (None: off)
    fidelity_margin: float | None = 0.10
    # False: test accuracy is only measured when the stop check needs it (NaN in other trace rows)
    track_test_acc: bool = False
    batch_size: int = 8
    seed: int = 0
    stall_patience: int = 5

    @property
    def lambda1(self):
        return 1.0 - self.lambda2

    def validate(self):
        if not 0.0 <= self.lambda2 < 1.0:
            raise InputError("lambda2 must lie in [0, 1)")
        if self.lr <= 0:
            raise InputError("unlearning learning rate must be > 0")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise InputError("max_epochs and batch_size must be >= 1")
        if self.stop_threshold is not None and not 0.0 <= self.stop_threshold <= 1.0:
            raise InputError("stop_threshold must lie in [0, 1]")
        for name in ("prob_margin", "fidelity_margin"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise InputError(f"{name} must be >= 0")
        return self


@dataclass
class TraceRow:
    epoch: int
    fidelity_loss: float
    privacy_loss: float
    mf_acc_df: float
    mean_prob_df: float
    test_acc: float
    total_loss: float
    elapsed_seconds: float


@dataclass
class UnlearnTrace:
    rows: list = field(default_factory=list)
    wall_time_seconds: float = 0.0
    privacy_time_seconds: float = 0.0
    initial_mf_acc: float = float("nan")
    initial_test_acc: float = float("nan")
    reference_prob: float = float("nan")
    stop_threshold: float = float("nan")
    converged: bool = False

    COLUMNS = ("epoch", "fidelity_loss", "privacy_loss", "mf_acc_df", "mean_prob_df", "test_acc", "total_loss",
               "elapsed_seconds")
    META = ("wall_time_seconds", "privacy_time_seconds", "initial_mf_acc", "initial_test_acc", "reference_prob",
            "stop_threshold", "converged")

    @property
    def epochs_run(self):
        return len(self.rows)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("# " + " ".join(f"{k}={getattr(self, k)!r}" for k in self.META) + "\n")
            writer = csv.writer(fh)
            writer.writerow(self.COLUMNS)
            for r in self.rows:
                writer.writerow([r.epoch] + [repr(getattr(r, c)) for c in self.COLUMNS[1:]])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            meta = dict(kv.split("=") for kv in fh.readline().lstrip("# ").split())
            rows = [TraceRow(int(r["epoch"]), *(float(r[c]) for c in cls.COLUMNS[1:])) for r in csv.DictReader(fh)]
        return cls(rows, float(meta["wall_time_seconds"]), float(meta["privacy_time_seconds"]),
                   float(meta["initial_mf_acc"]), float(meta["initial_test_acc"]), float(meta["reference_prob"]),
                   float(meta["stop_threshold"]), meta["converged"] == "True")


def privacy_loss_value(mean_prob):
    return -math.log(1.0 - mean_prob + EPS)


def privacy_loss(g, features):
    """-log(1 - mean membership probability + eps) as a graph node.

    ``features`` is a Tensor from the differentiable extraction path (or a
    plain array, in which case the result carries no gradient to w).
    """
    probs = g.prob_tensor(T.as_tensor(features))
    pbar = T.mean(probs)
    return T.mul(T.log(T.add(T.mul(pbar, -1.0), 1.0 + EPS)), -1.0), pbar


def _batch_rng(seed, epoch, stream):
    return np.random.default_rng([int(seed), int(epoch), stream])


def remi_unlearn(target, corpus, forget_idx, oos_idx, g, cfg, test_idx=None):
    """Return ``(unlearned_net, trace)``; ``target`` and ``g`` are left untouched.

    Each step pairs a D_f mini-batch with an equally sized D_o mini-batch.
    Epochs stop early once G's member rate on D_f drops to the stop threshold,
    D_f's mean attack probability is within ``prob_margin`` of D_o's under
    the original model, and test accuracy sits within ``fidelity_margin`` of
    where it started.
    Mean-pooled attack probabilities reward pushing every D_f sample toward
    one class, which meets the threshold at a test-accuracy trough; the D_o
    term pulls the model back within a few epochs.
    """
    cfg.validate()
    forget_idx = np.asarray(forget_idx, dtype=np.int64)
    oos_idx = np.asarray(oos_idx, dtype=np.int64)
    if forget_idx.size == 0 or oos_idx.size == 0:
        raise InputError("forget and out-of-sample sets must be non-empty")
    if np.intersect1d(forget_idx, oos_idx).size:
        raise InputError("forget set and out-of-sample set overlap")
    Xf, yf = corpus.subset(forget_idx)
    Xo, yo = corpus.subset(oos_idx)
    Xt, yt = corpus.subset(test_idx if test_idx is not None else oos_idx)
    g_frozen = g.net.get_flat()

    start = time.perf_counter()
    net = target.copy()
    opt = SGD(net.params, cfg.lr, cfg.momentum, cfg.weight_decay)
    trace = UnlearnTrace()
    trace.initial_mf_acc = member_rate(g.prob(extract_features(net, Xf, yf, g.spec)))
    trace.initial_test_acc = evaluate(net, Xt, yt)[1]
    floor = trace.initial_test_acc - cfg.fidelity_margin if cfg.fidelity_margin is not None else -np.inf
    if cfg.prob_margin is not None:
        trace.reference_prob = float(g.prob(extract_features(net, Xo, yo, g.spec)).mean())
        prob_ceiling = trace.reference_prob + cfg.prob_margin
    else:
        prob_ceiling = np.inf
    tau = cfg.stop_threshold if cfg.stop_threshold is not None else g.heldout_nonmember_rate + cfg.stop_margin
    trace.stop_threshold = float(tau)
    lam1, lam2 = cfg.lambda1, cfg.lambda2
    stalled = 0
    privacy_time = 0.0

    for epoch in range(1, cfg.max_epochs + 1):
        order_f = _batch_rng(cfg.seed, epoch, 0).permutation(forget_idx.size)
        order_o = _batch_rng(cfg.seed, epoch, 1).permutation(oos_idx.size)
        fid_sum = priv_sum = total_sum = 0.0
        steps = 0
        for s in range(0, forget_idx.size, cfg.batch_size):
            fb = order_f[s:s + cfg.batch_size]
            ob = order_o[np.arange(s, s + fb.size) % oos_idx.size]

            t0 = time.perf_counter()
            feats, probs_f = feature_tensor(net, Xf[fb], yf[fb], g.spec, with_probs=True)
            l_priv, pbar = privacy_loss(g, feats)
            privacy_time += time.perf_counter() - t0

            l_fid = T.add(cross_entropy(probs_f, yf[fb]), cross_entropy(net.forward(Xo[ob]), yo[ob]))
            total = T.add(T.mul(l_fid, lam1), T.mul(l_priv, lam2))
            if not np.isfinite(total.data):
                raise NumericError(f"unlearning loss became non-finite at epoch {epoch}")

            if lam2 > 0 and pbar.item() >= 1.0 - EPS:
                net.zero_grad()
                l_priv.backward()
                stalled = stalled + 1 if not np.any(net.flat_grad()) else 0
                if stalled >= cfg.stall_patience:
                    raise StallError("attack probability saturated at 1 with zero gradient", epoch)
            else:
                stalled = 0

            net.zero_grad()
            total.backward()
            g.net.zero_grad()
            opt.step()
            fid_sum += l_fid.item()
            priv_sum += l_priv.item()
            total_sum += total.item()
            steps += 1

        p_f = g.prob(extract_features(net, Xf, yf, g.spec))
        mf_acc, mean_p = member_rate(p_f), float(p_f.mean())
        private = mf_acc <= tau and mean_p <= prob_ceiling
        test_acc = float("nan")
        if cfg.track_test_acc or (private and cfg.fidelity_margin is not None):
            _, test_acc = evaluate(net, Xt, yt)
        fid, priv = fid_sum / steps, priv_sum / steps
        trace.rows.append(TraceRow(epoch, fid, priv, mf_acc, mean_p, test_acc, total_sum / steps,
                                   time.perf_counter() - start))
        if private and (cfg.fidelity_margin is None or test_acc >= floor):
            trace.converged = True
            break

    trace.wall_time_seconds = time.perf_counter() - start
    trace.privacy_time_seconds = privacy_time
    if not np.array_equal(g.net.get_flat(), g_frozen):
        raise StateError("privacy model parameters changed during unlearning")
    return net, trace


def naive_retrain(net, corpus, plan, forget_idx, cfg):
    """Train the freshly initialised ``net`` on D_r = target_train minus the forget set."""
    remainder = np.setdiff1d(plan.target_train, np.asarray(forget_idx, dtype=np.int64))
    if remainder.size == 0:
        raise InputError("remaining training set is empty")
    return train(net, corpus, remainder, plan.target_test, cfg)
