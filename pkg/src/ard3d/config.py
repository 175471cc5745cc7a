"""Run configuration: dataclasses with validated defaults plus a
line-oriented key=value file format with [sections].

Precedence elsewhere: CLI flag > config file > these defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class VaeConfig:
    M: int = 32           # occupancy resolution per axis
    stride: int = 4       # total spatial downsampling (two stride-2 stages)
    C_S: int = 4          # latent channels
    base_channels: int = 16
    kl_weight: float = 1e-3
    lr: float = 1e-3
    batch: int = 8

    @property
    def D(self) -> int:
        return self.M // self.stride

    def validate(self):
        if self.stride != 4:
            raise ConfigError("vae stride must be 4 (two stride-2 stages)")
        if self.M % self.stride:
            raise ConfigError(f"M={self.M} not divisible by stride {self.stride}")
        if self.C_S < 1 or self.base_channels < 1:
            raise ConfigError("channel counts must be positive")


@dataclass
class BackboneConfig:
    layers: int = 6
    hidden: int = 192
    q_heads: int = 6
    kv_heads: int = 2
    ffn_mult: int = 4
    max_seq: int = 2048

    def validate(self):
        if self.q_heads % self.kv_heads:
            raise ConfigError(f"q_heads {self.q_heads} not divisible by kv_heads {self.kv_heads}")
        if self.hidden % self.q_heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by q_heads {self.q_heads}")


@dataclass
class SamplerConfig:
    steps: int = 50
    cfg_text: float = 4.0
    cfg_3d: float = 2.0
    seed: int = 0

    def validate(self):
        if self.steps < 1:
            raise ConfigError("sampler steps must be >= 1")
        if self.cfg_text < 0 or self.cfg_3d < 0:
            raise ConfigError("cfg coefficients must be >= 0")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    steps: int = 4000
    dropout_p: float = 0.1       # per text / understanding block
    retain_min: int = 1          # generation blocks kept per sequence
    retain_max: int = 3
    max_refine_objects: int = 7  # objects given refinement substeps
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 50
    ckpt_every: int = 500

    def validate(self):
        if not (0 <= self.dropout_p < 1):
            raise ConfigError("dropout_p must be in [0, 1)")
        if not (1 <= self.retain_min <= self.retain_max):
            raise ConfigError("need 1 <= retain_min <= retain_max")


@dataclass
class GrammarConfig:
    M: int = 32
    n_min: int = 2
    n_max: int = 4
    max_objects: int = 15

    def validate(self):
        if not (2 <= self.n_min <= self.n_max <= self.max_objects <= 15):
            raise ConfigError("script length bounds must satisfy 2 <= n_min <= n_max <= 15")


@dataclass
class ModelConfig:
    gen_patch: int = 1   # generation-token patch size (ablation: 2)
    und_patch: int = 2   # understanding-token patch size
    mode: str = "ardplus"  # ard | ardplus

    def validate(self):
        if self.gen_patch not in (1, 2):
            raise ConfigError(f"gen_patch must be 1 or 2, got {self.gen_patch}")
        if self.und_patch not in (1, 2):
            raise ConfigError(f"und_patch must be 1 or 2, got {self.und_patch}")
        if self.mode not in ("ard", "ardplus"):
            raise ConfigError(f"mode must be ard or ardplus, got {self.mode!r}")


@dataclass
class Config:
    vae: VaeConfig = field(default_factory=VaeConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    grammar: GrammarConfig = field(default_factory=GrammarConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self):
        for f in fields(self):
            getattr(self, f.name).validate()
        if self.vae.M != self.grammar.M:
            raise ConfigError("vae.M and grammar.M must match")
        for p in (self.model.gen_patch, self.model.und_patch):
            if self.vae.D % p:
                raise ConfigError(f"patch size {p} does not divide D={self.vae.D}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(raw: str, target_type):
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    if target_type is str:
        return raw
    raise ConfigError(f"unsupported config value type {target_type}")


def load_config(path: str | Path | None) -> Config:
    """Parse [section] key=value lines into a Config; unknown sections or
    keys are rejected, malformed lines reported with their line number."""
    cfg = Config()
    if path is None:
        return cfg.validate()
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive (M, C_S)
    try:
        with open(path) as f:
            parser.read_file(f)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e
    sections = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for section in parser.sections():
        if section not in sections:
            raise ConfigError(f"{path}: unknown section [{section}]")
        sub = sections[section]
        known = {f.name: f.type for f in fields(sub)}
        types = {f.name: type(getattr(sub, f.name)) for f in fields(sub)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            try:
                setattr(sub, key, _coerce(raw, types[key]))
            except ValueError as e:
                raise ConfigError(f"{path}: bad value for {section}.{key}: {raw!r}") from e
    return cfg.validate()


def config_from_dict(d: dict) -> Config:
    cfg = Config()
    for f in fields(cfg):
        sub = getattr(cfg, f.name)
        for k, v in d.get(f.name, {}).items():
            if not hasattr(sub, k):
                raise ConfigError(f"unknown key {k!r} in section {f.name}")
            setattr(sub, k, v)
    return cfg.validate()
