"""Per-run metrics: fidelity, attack rates, KL, efficacy proxy, cross-attack matrix."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from remi.errors import InputError
from remi.features import extract_features, per_layer_grad_sq
from remi.privacy import fit_gaussian, kl_gaussian_shared, member_rate

EFFICACY_EPS = 1e-12


def efficacy_proxy(net, X, y, eps=EFFICACY_EPS, chunk=256):
    """1 / max(eps, mean over samples of the squared norm of grad_w log p(y|x)).

    The denominator is a diagonal Fisher-information estimate of how much
    the parameters still encode about (X, y); lower proxy means more retained.
    """
    y = np.asarray(y, dtype=np.int64)
    if y.size == 0:
        raise InputError("efficacy proxy needs at least one sample")
    X = np.asarray(X, dtype=np.float64)
    total = 0.0
    for s in range(0, y.size, chunk):
        total += float(per_layer_grad_sq(net, X[s:s + chunk], y[s:s + chunk]).sum())
    return 1.0 / max(eps, total / y.size)


def attack_probs(g, net, X, y):
    return g.prob(extract_features(net, X, y, g.spec, g.access))


def flag_rate(g, net, X, y):
    """Share of samples the attack model calls members (its accuracy when all are members)."""
    return member_rate(attack_probs(g, net, X, y))


def kl_to_reference(probs_df, probs_do):
    """Shared-sigma Gaussian KL between D_f and D_o attack-probability samples."""
    return kl_gaussian_shared(fit_gaussian(probs_df), fit_gaussian(probs_do))


@dataclass
class CrossAttackResult:
    """Member-flag rates per (guide, evaluator) on D_f before/after, plus D_o controls."""
    cells: dict = field(default_factory=dict)  # (guide, evaluator) -> (before, after)
    specificity: dict = field(default_factory=dict)  # (guide, evaluator) -> (D_o before, D_o after)

    def drop(self, guide, evaluator):
        before, after = self.cells[(guide, evaluator)]
        return before - after


def cross_attack_eval(unlearned, target, corpus, forget_idx, oos_idx, evaluators):
    """Evaluate every guide's unlearned model with every evaluator.

    ``unlearned`` maps guide name to its unlearned network; ``evaluators``
    maps evaluator name to an independently trained PrivacyModel.
    """
    Xf, yf = corpus.subset(forget_idx)
    Xo, yo = corpus.subset(oos_idx)
    res = CrossAttackResult()
    before_f = {e: flag_rate(g, target, Xf, yf) for e, g in evaluators.items()}
    before_o = {e: flag_rate(g, target, Xo, yo) for e, g in evaluators.items()}
    for guide, net in unlearned.items():
        for e, g in evaluators.items():
            res.cells[(guide, e)] = (before_f[e], flag_rate(g, net, Xf, yf))
            res.specificity[(guide, e)] = (before_o[e], flag_rate(g, net, Xo, yo))
    return res
