"""Run configuration: nested dataclasses loaded from / dumped to YAML."""

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from .discriminator import DiscriminatorConfig
from .generator import GeneratorConfig
from .losses import LossConfig

SCHEMA_VERSION = 1

# Defaults not fixed by the method description; flagged in dumped configs.
ASSUMED_KEYS = [
    "loss.topk_end", "loss.topk_decay_steps", "loss.r1_gamma", "loss.r1_interval", "loss.pl_weight",
    "loss.pl_interval", "loss.pl_ema_decay", "loss.cutmix_prob", "loss.consistency_weight",
    "loss.pixel_loss_weight", "loss.disorder_prob", "ada.target", "ada.adjustment_speed",
    "training.ema_decay", "discriminator.nonlocal_stages",
]


class ConfigError(ValueError):
    def __init__(self, problems: List[str]):
        self.problems = problems
        super().__init__("invalid config: " + "; ".join(problems))


@dataclass
class AdaConfig:
    enabled: bool = True
    initial_p: float = 0.0
    target: float = 0.6
    adjustment_speed: float = 0.002
    ema_decay: float = 0.99
    interval: int = 4


@dataclass
class DataConfig:
    window_length: int = 3
    stride: int = 1
    augment_flip: bool = False


@dataclass
class TrainingConfig:
    epochs: int = 100
    batch_size: int = 24
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    lr_generator: float = 2e-4
    lr_discriminator: float = 6e-4
    lr_mapping: float = 2e-6
    ema_decay: float = 0.999
    seed: int = 0
    max_steps: Optional[int] = None
    log_interval: int = 1
    checkpoint_interval: int = 1000
    sample_interval: int = 500
    sample_count: int = 4

    def __post_init__(self):
        if min(self.lr_generator, self.lr_discriminator, self.lr_mapping) <= 0:
            raise ValueError("learning rates must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if not 0 <= self.ema_decay <= 1:
            raise ValueError("ema_decay must lie in [0, 1]")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    ada: AdaConfig = field(default_factory=AdaConfig)
    data: DataConfig = field(default_factory=DataConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)

    def to_dict(self) -> Dict[str, Any]:
        d = dataclasses.asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "RunConfig":
        d = dict(d or {})
        problems = []
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            problems.append(f"schema_version {version} unsupported (expected {SCHEMA_VERSION})")
        d.pop("assumed_defaults", None)
        sections = {f.name: f.type for f in dataclasses.fields(cls)}
        for key in sorted(set(d) - set(sections)):
            problems.append(f"unknown key '{key}'")
        built = {}
        for name, typ in sections.items():
            raw = d.get(name) or {}
            if not isinstance(raw, dict):
                problems.append(f"'{name}' must be a mapping")
                continue
            allowed = {f.name for f in dataclasses.fields(typ)}
            bad = sorted(set(raw) - allowed)
            problems += [f"unknown key '{name}.{k}'" for k in bad]
            if bad:
                continue
            try:
                built[name] = typ(**raw)
            except (TypeError, ValueError) as exc:
                problems.append(f"'{name}': {exc}")
        if problems:
            raise ConfigError(problems)
        cfg = cls(**built)
        if cfg.generator.timesteps * 2 != cfg.discriminator.input_channels:
            raise ConfigError([f"discriminator.input_channels must be 2 * generator.timesteps = {cfg.generator.timesteps * 2}"])
        if cfg.data.window_length != cfg.generator.timesteps:
            raise ConfigError(["data.window_length must equal generator.timesteps"])
        return cfg


def load_config(path) -> RunConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError([f"{path}: top level must be a mapping"])
    return RunConfig.from_dict(raw or {})


def dump_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    d = cfg.to_dict()
    d["assumed_defaults"] = ASSUMED_KEYS
    path.write_text(yaml.safe_dump(d, sort_keys=False))
    return path


def apply_overrides(cfg: RunConfig, overrides: List[str]) -> RunConfig:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars."""
    d = cfg.to_dict()
    problems = []
    for item in overrides:
        key, sep, value = item.partition("=")
        parts = key.strip().split(".")
        if not sep or len(parts) != 2:
            problems.append(f"override '{item}' is not of the form section.key=value")
            continue
        section, name = parts
        if section not in d or not isinstance(d[section], dict) or name not in d[section]:
            problems.append(f"unknown key '{key}'")
            continue
        d[section][name] = yaml.safe_load(value)
    if problems:
        raise ConfigError(problems)
    return RunConfig.from_dict(d)


def tiny_config(resolution: int = 32, features: int = 32) -> RunConfig:
    """Desk-scale settings used by the smoke tests and the README quickstart."""
    stages = 3
    base = resolution // 2 ** (stages - 1)
    return RunConfig(
        generator=GeneratorConfig(stages=stages, features=features, latent_dim=64, mapping_layers=4, base_resolution=base),
        discriminator=DiscriminatorConfig(encoder_features=[32, 64, 128], decoder_features=[64, 32], nonlocal_stages=[1]),
        training=TrainingConfig(batch_size=8, epochs=1, checkpoint_interval=100, sample_interval=100),
    )
