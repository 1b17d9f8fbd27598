"""Staged experiment runner.

Artifacts live under ``output_dir/seed_<s>/`` (split, target, shadow, attack
models) and ``output_dir/seed_<s>/ratio_<r>/`` (forget set, unlearned and
retrained checkpoints, traces).  Every stage reads its inputs from disk, so
stages can be run one at a time and the evaluate stage is a pure function of
persisted artifacts.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from remi.core import checkpoint
from remi.datasets import ForgetSet, SplitPlan, load_csv, load_idx, make_synthetic, select_forget_set, split
from remi.errors import ConfigError, StageError
from remi.evaluation.metrics import attack_probs, cross_attack_eval, efficacy_proxy, kl_to_reference
from remi.evaluation.report import RunReport, empty_row
from remi.features import AttackDataset, FeatureSpec, build_attack_dataset
from remi.models import build
from remi.privacy import PrivacyModel, member_rate, train_privacy_model
from remi.training import TrainLog, accuracy, train, train_shadow
from remi.unlearn import UnlearnTrace, naive_retrain, remi_unlearn

log = logging.getLogger(__name__)

STAGES = ("train", "attack-train", "select-forget", "unlearn", "retrain", "evaluate")
# evaluator name -> (variant, access); MF models double as unlearning guides
EVALUATORS = {
    "mf_wb": ("MF", "white_box"),
    "mf_bb": ("MF", "black_box"),
    "mia_wb": ("MIA", "white_box"),
    "mia_bb": ("MIA", "black_box"),
}
GUIDES = {"white_box": "mf_wb", "black_box": "mf_bb"}
WORKERS_ENV = "REMI_WORKERS"


def init_seed(seed, role):
    """Parameter-init seed for one model role ("target", "shadow") of one experiment seed."""
    code = {"target": 1, "shadow": 2}[role]
    return int(np.random.SeedSequence([int(seed), code]).generate_state(1)[0])


def load_corpus(spec):
    if spec.kind == "synthetic":
        return make_synthetic(spec.num_classes, spec.per_class, spec.dim, spec.seed, sigma=spec.sigma,
                              mean_distance=spec.mean_distance, smoothing=spec.smoothing)
    if spec.kind == "idx":
        return load_idx(spec.images, spec.labels, spec.num_classes, side=spec.side or None)
    if spec.kind == "csv":
        side = spec.side
        return load_csv(spec.path, spec.num_classes, image_shape=(1, side, side) if side else None)
    raise ConfigError(f"unknown corpus kind {spec.kind!r}")


class Layout:
    def __init__(self, cfg, seed):
        self.root = Path(cfg.output_dir) / f"seed_{seed}"

    def ratio(self, ratio):
        return self.root / f"ratio_{ratio:g}"

    plan = property(lambda self: self.root / "split.json")
    target = property(lambda self: self.root / "target.remi")
    target_log = property(lambda self: self.root / "target_log.csv")
    shadow = property(lambda self: self.root / "shadow.remi")
    shadow_log = property(lambda self: self.root / "shadow_log.csv")

    def attack(self, name):
        return self.root / "attack" / f"{name}.remi"

    def attack_data(self, name):
        return self.root / "attack" / f"{name}.csv"


def _new_net(cfg, corpus, seed, role):
    return build(cfg.arch, corpus.samples.shape[1], corpus.num_classes, seed=init_seed(seed, role),
                 image_shape=corpus.image_shape)


def _seeded(c, seed):
    return dataclasses.replace(c, seed=int(seed))


# stages ------------------------------------------------------------------------

def stage_train(cfg, seed, corpus):
    lay = Layout(cfg, seed)
    lay.root.mkdir(parents=True, exist_ok=True)
    plan = split(corpus, seed)
    plan.save(lay.plan)
    tcfg = _seeded(cfg.train, seed)
    target, tlog = train(_new_net(cfg, corpus, seed, "target"), corpus, plan.target_train, plan.target_test, tcfg)
    checkpoint.save(target, lay.target)
    tlog.to_csv(lay.target_log)
    shadow, slog = train_shadow(_new_net(cfg, corpus, seed, "shadow"), corpus, plan, tcfg)
    checkpoint.save(shadow, lay.shadow)
    slog.to_csv(lay.shadow_log)


def stage_attack(cfg, seed, corpus):
    lay = Layout(cfg, seed)
    plan = SplitPlan.load(lay.plan)
    models = {"MF": (checkpoint.load(lay.target), plan.target_train, plan.target_test),
              "MIA": (checkpoint.load(lay.shadow), plan.shadow_in, plan.shadow_out)}
    lay.attack("x").parent.mkdir(exist_ok=True)
    acfg = _seeded(cfg.attack, seed)
    for name, (variant, access) in EVALUATORS.items():
        net, members, nonmembers = models[variant]
        spec = FeatureSpec.white_box() if access == "white_box" else FeatureSpec.black_box()
        data = build_attack_dataset(net, corpus, members, nonmembers, spec, access, seed=seed)
        data.to_csv(lay.attack_data(name))
        g = train_privacy_model(data, acfg, variant=variant)
        g.save(lay.attack(name))


def stage_select(cfg, seed, corpus):
    lay = Layout(cfg, seed)
    plan = SplitPlan.load(lay.plan)
    target = checkpoint.load(lay.target)
    g = PrivacyModel.load(lay.attack(GUIDES[cfg.guide]))
    X, y = corpus.subset(plan.target_train)
    scores = attack_probs(g, target, X, y)
    for ratio in cfg.ratios:
        d = lay.ratio(ratio)
        d.mkdir(parents=True, exist_ok=True)
        select_forget_set(plan, corpus.labels, scores, ratio).save(d / "forget.json")


def _guides(cfg):
    names = [GUIDES[cfg.guide]]
    if cfg.cross_attack:
        names += [n for n in GUIDES.values() if n != names[0]]
    return names


def stage_unlearn(cfg, seed, corpus):
    lay = Layout(cfg, seed)
    plan = SplitPlan.load(lay.plan)
    target = checkpoint.load(lay.target)
    ucfg = _seeded(cfg.unlearn, seed)
    for name in _guides(cfg):
        g = PrivacyModel.load(lay.attack(name))
        for ratio in cfg.ratios:
            d = lay.ratio(ratio)
            forget = ForgetSet.load(d / "forget.json")
            net, trace = remi_unlearn(target, corpus, forget.indices, plan.target_test, g, ucfg,
                                      test_idx=plan.target_test)
            checkpoint.save(net, d / f"unlearned_{name}.remi")
            trace.to_csv(d / f"trace_{name}.csv")


def stage_retrain(cfg, seed, corpus):
    lay = Layout(cfg, seed)
    plan = SplitPlan.load(lay.plan)
    tcfg = _seeded(cfg.train, seed)
    for ratio in cfg.ratios:
        d = lay.ratio(ratio)
        forget = ForgetSet.load(d / "forget.json")
        net, rlog = naive_retrain(_new_net(cfg, corpus, seed, "target"), corpus, plan, forget.indices, tcfg)
        checkpoint.save(net, d / "retrained.remi")
        rlog.to_csv(d / "retrain_log.csv")


def _acc(net, corpus, idx):
    return accuracy(net, corpus, idx) if len(idx) else math.nan


def evaluate_cell(cfg, seed, ratio, corpus):
    """One report row, computed only from persisted artifacts."""
    lay = Layout(cfg, seed)
    d = lay.ratio(ratio)
    plan = SplitPlan.load(lay.plan)
    forget = ForgetSet.load(d / "forget.json")
    f_idx, o_idx = forget.indices, plan.target_test
    r_idx = forget.remainder(plan)
    guide = GUIDES[cfg.guide]
    target = checkpoint.load(lay.target)
    unlearned = {n: checkpoint.load(d / f"unlearned_{n}.remi") for n in _guides(cfg)}
    after = unlearned[guide]
    retrained = checkpoint.load(d / "retrained.remi")
    evaluators = {n: PrivacyModel.load(lay.attack(n)) for n in EVALUATORS}
    trace = UnlearnTrace.from_csv(d / f"trace_{guide}.csv")
    rlog = TrainLog.from_csv(d / "retrain_log.csv")
    Xf, yf = corpus.subset(f_idx)
    Xo, yo = corpus.subset(o_idx)

    row = empty_row()
    row.update(seed=int(seed), ratio=float(ratio), n_forget=len(f_idx), status="complete", guide=guide,
               guide_heldout_acc=evaluators[guide].heldout_accuracy)
    for phase, net in (("before", target), ("after", after), ("retrain", retrained)):
        row[f"acc_df_{phase}"] = _acc(net, corpus, f_idx)
        row[f"acc_dr_{phase}"] = _acc(net, corpus, r_idx)
        row[f"acc_test_{phase}"] = _acc(net, corpus, o_idx)
        row[f"efficacy_proxy_{phase}"] = efficacy_proxy(net, Xf, yf)
    for name, g in evaluators.items():
        for phase, net in (("before", target), ("after", after), ("retrain", retrained)):
            row[f"attack_{name}_{phase}"] = member_rate(attack_probs(g, net, Xf, yf))
            row[f"attack_{name}_do_{phase}"] = member_rate(attack_probs(g, net, Xo, yo))
    if cfg.cross_attack:
        other = [n for n in unlearned if n != guide][0]
        cross = cross_attack_eval({other: unlearned[other]}, target, corpus, f_idx, o_idx, evaluators)
        for name in evaluators:
            row[f"attack_{name}_after_xguide"] = cross.cells[(other, name)][1]
    g = evaluators[guide]
    p_do = attack_probs(g, target, Xo, yo)
    row["mean_prob_do"] = float(p_do.mean())
    for phase, net in (("before", target), ("after", after), ("retrain", retrained)):
        p_df = attack_probs(g, net, Xf, yf)
        row[f"mean_prob_df_{phase}"] = float(p_df.mean())
        row[f"kl_{phase}"] = kl_to_reference(p_df, p_do) if p_df.size >= 2 else math.nan
    row.update(unlearn_epochs=trace.epochs_run, unlearn_converged=trace.converged,
               t_unlearn=trace.wall_time_seconds, t_privacy_loss=trace.privacy_time_seconds,
               t_retrain=rlog.wall_time_seconds)
    row["speedup"] = row["t_retrain"] / row["t_unlearn"] if row["t_unlearn"] > 0 else math.inf
    (d / "metrics.json").write_text(json.dumps(row, indent=1))
    return row


def stage_evaluate(cfg, seed, corpus):
    return [evaluate_cell(cfg, seed, r, corpus) for r in cfg.ratios]


STAGE_FUNCS = {
    "train": stage_train,
    "attack-train": stage_attack,
    "select-forget": stage_select,
    "unlearn": stage_unlearn,
    "retrain": stage_retrain,
    "evaluate": stage_evaluate,
}


def run_stage(cfg, stage, seed, corpus=None):
    """Run one stage for one seed, wrapping any failure in a StageError."""
    corpus = corpus if corpus is not None else load_corpus(cfg.corpus)
    log.info("seed %s: %s", seed, stage)
    try:
        return STAGE_FUNCS[stage](cfg, seed, corpus)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - recorded with its stage tag
        raise StageError(stage, exc) from exc


def _incomplete_rows(cfg, seed, stage):
    rows = []
    for ratio in cfg.ratios:
        row = empty_row()
        row.update(seed=int(seed), ratio=float(ratio), status=f"incomplete:{stage}", guide=GUIDES[cfg.guide])
        rows.append(row)
    return rows


def run_seed(cfg, seed, stages=STAGES):
    """All requested stages for one seed; returns report rows (possibly incomplete)."""
    corpus = load_corpus(cfg.corpus)
    rows = None
    for stage in stages:
        try:
            out = run_stage(cfg, stage, seed, corpus)
        except StageError as exc:
            log.error("seed %s failed in %s: %s", seed, exc.stage, exc.cause)
            return _incomplete_rows(cfg, seed, exc.stage)
        if stage == "evaluate":
            rows = out
    return rows or []


def worker_count(default=1):
    raw = os.environ.get(WORKERS_ENV, "")
    try:
        return max(1, int(raw)) if raw else default
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None


def _run_seed_args(args):
    return run_seed(*args)


def run_experiment(cfg, stages=STAGES, workers=None):
    """Run every stage for every seed and write report.csv / report.md.

    Seeds fan out to ``workers`` processes; rows are assembled in seed order.
    Timings measured under parallel load are not comparable, so latency
    results should come from ``workers=1`` runs.
    """
    cfg.validate()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    workers = workers or worker_count()
    jobs = [(cfg, s, tuple(stages)) for s in cfg.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(_run_seed_args, jobs))
    else:
        per_seed = [_run_seed_args(j) for j in jobs]
    report = RunReport(cfg.name, cfg.arch, [r for rows in per_seed for r in rows])
    if "evaluate" in stages:
        report.to_csv(out / "report.csv")
        (out / "report.md").write_text(report.to_markdown())
    return report


def collect_report(cfg):
    """Rebuild the report from per-cell metrics.json files; missing cells are incomplete."""
    rows = []
    for seed in cfg.seeds:
        lay = Layout(cfg, seed)
        for ratio in cfg.ratios:
            path = lay.ratio(ratio) / "metrics.json"
            if path.exists():
                row = empty_row()
                row.update(json.loads(path.read_text()))
                rows.append(row)
            else:
                rows.extend(r for r in _incomplete_rows(cfg, seed, "evaluate") if r["ratio"] == float(ratio))
    return RunReport(cfg.name, cfg.arch, rows)


def load_attack_dataset(cfg, seed, name):
    return AttackDataset.from_csv(Layout(cfg, seed).attack_data(name))
