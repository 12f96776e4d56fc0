"""Experiment configuration: strict sectioned key=value files.

Every key is typed and validated at parse time; unknown sections or keys
are rejected, and every error names the offending field path (for
example "model.m"). render_config(parse_config(p)) round-trips exactly.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .orchestrator import FLConfig
from .vit import ViTConfig


@dataclass(frozen=True)
class DatasetSection:
    kind: str = "toy"            # toy | file
    classes: int = 4
    image_size: int = 16
    patch_size: int = 4
    channels: int = 1
    train_per_class: int = 250
    test_per_class: int = 50
    noise: float = 0.1
    path: str = ""               # binary dataset path when kind=file


@dataclass(frozen=True)
class ModelSection:
    d: int = 768
    heads: int = 12
    n_t: int = 12
    m: int = 2
    mlp_ratio: int = 4


@dataclass(frozen=True)
class FLSection:
    k: int = 100
    p: float = 0.1
    rounds: int = 30
    local_epochs: int = 3
    server_epochs: int = 1
    beta: float = 0.1
    seed: int = 0
    broadcast_head: bool = True
    eval_every: int = 1


@dataclass(frozen=True)
class TrainSection:
    lr: float = 5e-5
    weight_decay: float = 0.05
    warmup_frac: float = 0.1
    batch_size: int = 32
    r_m: float = 0.75
    augment: bool = True


@dataclass(frozen=True)
class CostSection:
    bandwidth_mbps: float = 500.0


@dataclass(frozen=True)
class RunSection:
    baseline: str = "none"       # none | fed_full | fed_head


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    fl: FLSection = field(default_factory=FLSection)
    train: TrainSection = field(default_factory=TrainSection)
    cost: CostSection = field(default_factory=CostSection)
    run: RunSection = field(default_factory=RunSection)

    def vit_config(self) -> ViTConfig:
        ds, m = self.dataset, self.model
        try:
            return ViTConfig(h=ds.image_size, w_img=ds.image_size, p=ds.patch_size,
                             d=m.d, heads=m.heads, n_t=m.n_t, m=m.m,
                             mlp_ratio=m.mlp_ratio, c=ds.classes,
                             channels=ds.channels)
        except ConfigError as e:
            raise ConfigError(f"model/dataset: {e}") from e

    def fl_config(self) -> FLConfig:
        f, t = self.fl, self.train
        return FLConfig(k=f.k, p_select=f.p, rounds=f.rounds,
                        local_epochs=f.local_epochs, server_epochs=f.server_epochs,
                        beta=f.beta, r_m=t.r_m, seed=f.seed, lr=t.lr,
                        weight_decay=t.weight_decay, warmup_frac=t.warmup_frac,
                        batch_size=t.batch_size, augment=t.augment,
                        broadcast_head=f.broadcast_head, eval_every=f.eval_every)


_SECTIONS = {
    "dataset": DatasetSection,
    "model": ModelSection,
    "fl": FLSection,
    "train": TrainSection,
    "cost": CostSection,
    "run": RunSection,
}


def _parse_value(section: str, key: str, raw: str, ftype):
    path = f"{section}.{key}"
    raw = raw.strip()
    try:
        if ftype is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if ftype is int:
            return int(raw)
        if ftype is float:
            return float(raw)
        if ftype is str:
            return raw
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from e
    raise ConfigError(f"{path}: unsupported field type {ftype}")


def parse_config_text(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"config syntax: {e}") from e

    kwargs = {}
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        cls = _SECTIONS[section]
        ftypes = {f.name: f.type for f in fields(cls)}
        # dataclass field types arrive as strings under future annotations
        resolved = {n: {"int": int, "float": float, "bool": bool, "str": str}[t]
                    for n, t in ftypes.items()}
        values = {}
        for key, raw in cp.items(section):
            if key not in resolved:
                raise ConfigError(f"unknown key {section}.{key}")
            values[key] = _parse_value(section, key, raw, resolved[key])
        kwargs[section] = cls(**values)
    cfg = ExperimentConfig(**kwargs)
    _validate(cfg)
    return cfg


def parse_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text(encoding="utf-8"))


def render_config(cfg: ExperimentConfig) -> str:
    lines = []
    for section, cls in _SECTIONS.items():
        lines.append(f"[{section}]")
        sec = getattr(cfg, section)
        for f in fields(cls):
            v = getattr(sec, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)


def _validate(cfg: ExperimentConfig):
    ds, m, f, t, c, r = cfg.dataset, cfg.model, cfg.fl, cfg.train, cfg.cost, cfg.run
    def need(cond, path, msg):
        if not cond:
            raise ConfigError(f"{path}: {msg}")

    need(ds.kind in ("toy", "file"), "dataset.kind", f"must be toy|file, got {ds.kind!r}")
    if ds.kind == "file":
        need(bool(ds.path), "dataset.path", "required when dataset.kind = file")
    need(ds.classes >= 2, "dataset.classes", "need at least two classes")
    need(ds.image_size >= 1, "dataset.image_size", "must be positive")
    need(ds.patch_size >= 1, "dataset.patch_size", "must be positive")
    need(ds.image_size % ds.patch_size == 0, "dataset.patch_size",
         f"{ds.image_size} not divisible by {ds.patch_size}")
    need(ds.train_per_class >= 1 and ds.test_per_class >= 1,
         "dataset.train_per_class", "per-class counts must be >= 1")
    need(ds.noise >= 0, "dataset.noise", "must be >= 0")

    need(m.n_t >= 2, "model.n_t", "need at least two layers to split")
    need(1 <= m.m <= m.n_t - 1, "model.m",
         f"must satisfy 1 <= m <= n_t-1 = {m.n_t - 1}, got {m.m}")
    need(m.d % m.heads == 0, "model.heads", f"d={m.d} not divisible by heads={m.heads}")
    need(m.mlp_ratio >= 1, "model.mlp_ratio", "must be >= 1")

    need(f.k >= 1, "fl.k", "must be >= 1")
    need(0 < f.p <= 1, "fl.p", f"must lie in (0, 1], got {f.p}")
    need(f.rounds >= 1, "fl.rounds", "must be >= 1")
    need(f.local_epochs >= 1, "fl.local_epochs", "must be >= 1")
    need(f.server_epochs >= 1, "fl.server_epochs", "must be >= 1")
    need(f.beta > 0, "fl.beta", f"must be > 0, got {f.beta}")
    need(f.eval_every >= 1, "fl.eval_every", "must be >= 1")

    need(t.lr > 0, "train.lr", "must be > 0")
    need(t.weight_decay >= 0, "train.weight_decay", "must be >= 0")
    need(0 <= t.warmup_frac < 1, "train.warmup_frac", f"must lie in [0, 1), got {t.warmup_frac}")
    need(t.batch_size >= 1, "train.batch_size", "must be >= 1")
    need(0 <= t.r_m < 1, "train.r_m", f"must lie in [0, 1), got {t.r_m}")

    need(c.bandwidth_mbps > 0, "cost.bandwidth_mbps", "must be > 0")
    need(r.baseline in ("none", "fed_full", "fed_head"), "run.baseline",
         f"must be none|fed_full|fed_head, got {r.baseline!r}")
