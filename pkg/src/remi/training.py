"""Target and shadow model training."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from remi.core.nn import cross_entropy
from remi.core.optim import SGD
from remi.errors import InputError, NumericError, TrainingError


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    early_stop_patience: int | None = None

    def validate(self):
        if self.epochs < 1:
            raise InputError("epochs must be >= 1")
        if self.lr <= 0:
            raise InputError("learning rate must be > 0")
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")
        return self


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    eval_loss: float
    eval_acc: float


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    wall_time_seconds: float = 0.0
    best_epoch: int | None = None

    COLUMNS = ("epoch", "train_loss", "train_acc", "eval_loss", "eval_acc")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(f"# wall_time_seconds={self.wall_time_seconds!r} best_epoch={self.best_epoch}\n")
            writer = csv.writer(fh)
            writer.writerow(self.COLUMNS)
            for r in self.rows:
                writer.writerow([r.epoch] + [repr(getattr(r, c)) for c in self.COLUMNS[1:]])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            meta = dict(kv.split("=") for kv in fh.readline().lstrip("# ").split())
            reader = csv.DictReader(fh)
            rows = [EpochRecord(int(r["epoch"]), *(float(r[c]) for c in cls.COLUMNS[1:])) for r in reader]
        best = None if meta["best_epoch"] == "None" else int(meta["best_epoch"])
        return cls(rows, float(meta["wall_time_seconds"]), best)


def epoch_order(n, seed, epoch):
    """Batch order for one epoch; depends only on (seed, epoch), never on history."""
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


def evaluate(net, X, y, chunk=1024):
    """Mean cross-entropy and accuracy without recording gradients."""
    if len(y) == 0:
        return float("nan"), float("nan")
    probs = net.predict_proba(X, chunk)
    p = np.clip(probs[np.arange(len(y)), y], 1e-12, None)
    return float(-np.log(p).mean()), float((probs.argmax(axis=1) == y).mean())


def fit(net, X, y, X_eval, y_eval, cfg):
    """SGD on (X, y) for ``cfg.epochs`` epochs, evaluating on (X_eval, y_eval) each epoch."""
    cfg.validate()
    if net.num_outputs <= int(np.max(y)):
        raise InputError("network output dimension smaller than the label range")
    opt = SGD(net.params, cfg.lr, cfg.momentum, cfg.weight_decay)
    log = TrainLog()
    best_loss, best_flat, stale = np.inf, None, 0
    start = time.perf_counter()
    n = len(y)
    for epoch in range(1, cfg.epochs + 1):
        order = epoch_order(n, cfg.seed, epoch)
        loss_sum, correct = 0.0, 0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            try:
                probs = net.forward(X[idx])
                loss = cross_entropy(probs, y[idx])
                if not np.isfinite(loss.data):
                    raise TrainingError("loss became non-finite", epoch)
                net.backward(loss)
                opt.step()
            except NumericError as exc:
                raise TrainingError(f"diverged: {exc}", epoch) from exc
            loss_sum += loss.item() * idx.size
            correct += int((probs.data.argmax(axis=1) == y[idx]).sum())
        eval_loss, eval_acc = evaluate(net, X_eval, y_eval)
        log.rows.append(EpochRecord(epoch, loss_sum / n, correct / n, eval_loss, eval_acc))
        if cfg.early_stop_patience is not None:
            if eval_loss < best_loss:
                best_loss, best_flat, stale = eval_loss, net.get_flat(), 0
                log.best_epoch = epoch
            else:
                stale += 1
                if stale > cfg.early_stop_patience:
                    break
    if best_flat is not None:
        net.set_flat(best_flat)
    log.wall_time_seconds = time.perf_counter() - start
    return net, log


def train(net, corpus, train_idx, eval_idx, cfg):
    """Train ``net`` on corpus rows ``train_idx``; ``eval_idx`` plays the out-of-sample role."""
    X, y = corpus.subset(train_idx)
    Xe, ye = corpus.subset(eval_idx)
    if net.num_outputs != corpus.num_classes:
        raise InputError(f"network has {net.num_outputs} outputs, corpus has {corpus.num_classes} classes")
    return fit(net, X, y, Xe, ye, cfg)


def train_shadow(net, corpus, plan, cfg):
    """Train a shadow copy of the target architecture on shadow_in, evaluated on shadow_out."""
    if np.intersect1d(plan.shadow_in, plan.target_train).size:
        raise InputError("shadow_in overlaps target_train")
    return train(net, corpus, plan.shadow_in, plan.shadow_out, cfg)


def accuracy(net, corpus, indices):
    """Fraction of argmax-correct predictions (ties go to the lowest class id)."""
    X, y = corpus.subset(indices)
    if y.size == 0:
        raise InputError("accuracy over an empty index set")
    return float((net.predict_proba(X).argmax(axis=1) == y).mean())

