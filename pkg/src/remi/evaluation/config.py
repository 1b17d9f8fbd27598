"""Experiment files: one TOML document per reproduced table or figure."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from remi.errors import ConfigError, InputError
from remi.models import ARCHITECTURES
from remi.privacy import default_attack_config
from remi.training import TrainConfig
from remi.unlearn import UnlearnConfig

CORPUS_KINDS = ("synthetic", "idx", "csv")
ACCESS = ("white_box", "black_box")


@dataclass
class CorpusSpec:
    kind: str = "synthetic"
    num_classes: int = 4
    # synthetic
    per_class: int = 400
    dim: int = 256
    sigma: float = 1.0
    mean_distance: float = 6.0
    smoothing: float = 0.0
    seed: int = 7
    # idx / csv
    images: str = ""
    labels: str = ""
    path: str = ""
    side: int = 0


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    arch: str = "cnn"
    ratios: list = field(default_factory=lambda: [0.01, 0.1, 0.25, 0.5])
    seeds: list = field(default_factory=lambda: [0])
    guide: str = "white_box"
    cross_attack: bool = True
    output_dir: str = "runs/experiment"
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: TrainConfig = field(default_factory=default_attack_config)
    unlearn: UnlearnConfig = field(default_factory=UnlearnConfig)

    def validate(self):
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"arch must be one of {ARCHITECTURES}")
        if not self.ratios or not all(0.0 < float(r) < 1.0 for r in self.ratios):
            raise ConfigError("ratios must be a non-empty list of values in (0, 1)")
        if not self.seeds or not all(isinstance(s, int) and s >= 0 for s in self.seeds):
            raise ConfigError("seeds must be a non-empty list of non-negative integers")
        if len(set(self.seeds)) != len(self.seeds) or len(set(self.ratios)) != len(self.ratios):
            raise ConfigError("seeds and ratios must not repeat")
        if self.guide not in ACCESS:
            raise ConfigError(f"guide must be one of {ACCESS}")
        if self.corpus.kind not in CORPUS_KINDS:
            raise ConfigError(f"corpus.kind must be one of {CORPUS_KINDS}")
        if self.corpus.kind == "idx" and not (self.corpus.images and self.corpus.labels):
            raise ConfigError("idx corpus needs corpus.images and corpus.labels")
        if self.corpus.kind == "csv" and not self.corpus.path:
            raise ConfigError("csv corpus needs corpus.path")
        try:
            self.train.validate()
            self.attack.validate()
            self.unlearn.validate()
        except InputError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_dict(self):
        return dataclasses.asdict(self)


_SECTIONS = {"corpus": CorpusSpec, "train": TrainConfig, "attack": TrainConfig, "unlearn": UnlearnConfig}


def _build(cls, values, where):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    return values


def from_dict(d):
    d = dict(d)
    top = {}
    for key, cls in _SECTIONS.items():
        section = d.pop(key, {})
        if not isinstance(section, dict):
            raise ConfigError(f"[{key}] must be a table")
        base = ExperimentConfig().__getattribute__(key)
        top[key] = dataclasses.replace(base, **_build(cls, section, f"[{key}]"))
    _build(ExperimentConfig, d, "top level")
    try:
        cfg = ExperimentConfig(**d, **top)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.ratios = [float(r) for r in cfg.ratios]
    return cfg.validate()


def _parse_value(text):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(d, overrides):
    """Apply ``dotted.key=value`` strings; values use TOML syntax, bare words are strings."""
    d = {k: dict(v) if isinstance(v, dict) else v for k, v in d.items()}
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a non-table")
        node[parts[-1]] = _parse_value(raw.strip())
    return d


def load_config(path, overrides=()):
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"experiment file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = from_dict(apply_overrides(raw, overrides))
    out = Path(cfg.output_dir)
    if not out.is_absolute():
        cfg.output_dir = str((path.parent / out).resolve()) if "output_dir" in raw else str(out.resolve())
    for attr in ("images", "labels", "path"):
        value = getattr(cfg.corpus, attr)
        if value and not Path(value).is_absolute():
            setattr(cfg.corpus, attr, str((path.parent / value).resolve()))
    return cfg
