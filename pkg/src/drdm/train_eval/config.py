"""Structured run configuration with strict key checking."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


def _from_dict(cls, data: dict | None, where: str):
    data = dict(data or {})
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {unknown}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        if sub is not None and value is not None:
            value = _from_dict(sub, value, f"{where}.{name}")
        elif isinstance(value, list) and name in _TUPLE_FIELDS:
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


_TUPLE_FIELDS = {"counts", "widths", "backbone_widths", "shots", "extra_trainable"}


@dataclass
class SyntheticSection:
    group_count: int = 4
    classes_per_group: int = 5
    images_per_class: int = 30
    image_size: int = 32
    patch_size: int = 8
    noise_std: float = 0.1
    seed: int = 7
    name: str = "synthetic-fgvc"
    vocabulary: str = "default"
    patch_jitter: int = 4


@dataclass
class SplitSection:
    counts: tuple[int, int, int] | None = (10, 5, 5)
    seed: int = 0
    train: list[int] | None = None
    val: list[int] | None = None
    test: list[int] | None = None


@dataclass
class DataSection:
    manifest: str | None = None
    extra_manifest: str | None = None
    synthetic: SyntheticSection | None = field(default_factory=SyntheticSection)
    extra_synthetic: SyntheticSection | None = field(default_factory=lambda: SyntheticSection(
        group_count=2, classes_per_group=5, images_per_class=30, seed=11,
        name="synthetic-extra", vocabulary="extra"))
    split: SplitSection = field(default_factory=SplitSection)
    image_size: int = 32


@dataclass
class DSRSection:
    enabled: bool = True
    checkpoint: str | None = None
    kind: str = "unet"
    widths: tuple[int, ...] = (16, 32)
    cond_width: int = 64
    adapter_width: int = 16
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    pretrain_steps: int = 1500
    pretrain_on_extra: bool = True
    pretrain_lr: float = 2e-3
    steps: int = 500
    lr: float = 1e-3
    batch_size: int = 32
    alpha: float | None = 0.5
    extra_trainable: tuple[str, ...] = ()
    sample_steps: int | None = 50
    cond_drop: float = 0.0
    guidance: float = 1.0
    per_class: int = 30
    seed: int = 0


@dataclass
class FewShotSection:
    N: int = 5
    K: int = 1
    U: int = 16
    W: int = 5
    beta: float = 0.5
    lr_backbone: float = 0.001
    lr_heads: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 4
    episodes_per_epoch: int = 100
    val_episodes: int = 200
    backbone_widths: tuple[int, ...] = (16, 32, 64, 64)
    pooled_stages: int = 3
    feature_scale: float = 1.0
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if min(self.lr_backbone, self.lr_heads) < 0:
            raise ValueError("learning rates must be >= 0")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")


@dataclass
class EvalSection:
    N: int = 5
    shots: tuple[int, ...] = (1, 5)
    U: int = 16
    episodes: int = 600
    seed: int = 1234


@dataclass
class SweepSection:
    alpha: list[Any] = field(default_factory=lambda: [0.1, 0.3, 0.5, 0.7, 0.9, None])
    beta: list[float] = field(default_factory=lambda: [0.1, 0.3, 0.5, 0.7])
    W: list[int] = field(default_factory=lambda: [1, 3, 5, 7])


@dataclass
class AblationSection:
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])


@dataclass
class RunConfig:
    seed: int = 0
    out: str | None = None
    dataset: str = "synthetic"
    data: DataSection = field(default_factory=DataSection)
    dsr: DSRSection = field(default_factory=DSRSection)
    fewshot: FewShotSection = field(default_factory=FewShotSection)
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    @classmethod
    def from_dict(cls, data: dict | None) -> "RunConfig":
        return _from_dict(cls, data, "config")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def replace(self, **sections) -> "RunConfig":
        """Copy with nested overrides, e.g. ``replace(fewshot={"beta": 0})``."""
        return RunConfig.from_dict(_deep_merge(self.to_dict(), sections))

    def digest(self) -> str:
        return config_hash(self.to_dict())


_NESTED = {
    (RunConfig, "data"): DataSection,
    (RunConfig, "dsr"): DSRSection,
    (RunConfig, "fewshot"): FewShotSection,
    (RunConfig, "eval"): EvalSection,
    (RunConfig, "sweep"): SweepSection,
    (RunConfig, "ablation"): AblationSection,
    (DataSection, "synthetic"): SyntheticSection,
    (DataSection, "extra_synthetic"): SyntheticSection,
    (DataSection, "split"): SplitSection,
}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def config_hash(d: dict) -> str:
    return hashlib.sha1(json.dumps(_plain(d), sort_keys=True).encode()).hexdigest()[:12]


def _parse_value(text: str):
    return yaml.safe_load(text)


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` overrides (values parsed as YAML)."""
    d = copy.deepcopy(d)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            if node.get(p) is None:
                node[p] = {}
            node = node[p]
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} walks into a non-section")
        node[parts[-1]] = _parse_value(raw)
    return d


def load_config(path: str | Path | None, overrides: list[str] = ()) -> RunConfig:
    data = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    base = RunConfig().to_dict()
    merged = _deep_merge(base, data)
    return RunConfig.from_dict(apply_overrides(merged, list(overrides)))


def _deep_merge(base: dict, new: dict) -> dict:
    out = dict(base)
    for k, v in new.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def dump_config(cfg: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    return path
