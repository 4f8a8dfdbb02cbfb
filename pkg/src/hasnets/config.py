"""Experiment configuration: flat INI-style text with strict parsing.

Every field has a default, every value in a file must match a known
section/key (unknown ones are fatal), and the loaded config re-serializes
with all defaults materialized so each run directory carries the complete
settings it ran with.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields

from .errors import ConfigurationError

_TRUE = ("true", "yes", "1", "on")
_FALSE = ("false", "no", "0", "off")


@dataclass
class RunCfg:
    seed: int = 0
    out: str = "runs/latest"


@dataclass
class DataCfg:
    source: str = "synth"
    synth_n: int = 10000
    synth_classes: int = 10
    synth_hw: int = 16
    idx_images: str = ""
    idx_labels: str = ""
    cache_path: str = ""

    def validate(self):
        if self.source not in ("synth", "idx", "cache"):
            raise ConfigurationError(f"unknown data source {self.source!r}")
        if self.source == "idx" and (not self.idx_images or not self.idx_labels):
            raise ConfigurationError("idx source needs idx_images and idx_labels paths")
        if self.source == "cache" and not self.cache_path:
            raise ConfigurationError("cache source needs cache_path")


@dataclass
class SplitCfg:
    healing_fraction: float = 0.15
    test_count: int = 2000

    def validate(self):
        if not 0.0 < self.healing_fraction < 0.5:
            raise ConfigurationError(
                f"healing_fraction must be in (0, 0.5), got {self.healing_fraction}")
        if self.test_count < 1:
            raise ConfigurationError("test_count must be positive")


@dataclass
class PoisonCfg:
    mode: str = "none"
    budget: float = 0.01
    epsilon: float = 1.0
    target_class: int = 0
    target_class_2: int = 1
    selection: str = "first_k"
    trigger: str = "default"
    trigger2: str = "default"
    noise_amplitude: float = 0.1

    def validate(self):
        modes = ("none", "conventional", "epsilon", "epsilon2", "invisible", "all_trojan")
        if self.mode not in modes:
            raise ConfigurationError(f"unknown poison mode {self.mode!r}")
        if self.selection not in ("first_k", "seeded_random"):
            raise ConfigurationError(f"unknown selection {self.selection!r}")
        if self.mode != "none" and not 0.1 <= self.epsilon <= 1.0:
            raise ConfigurationError(
                f"epsilon must lie in [0.1, 1.0], got {self.epsilon}")
        if self.budget < 0:
            raise ConfigurationError("budget must be nonnegative")


@dataclass
class ModelCfg:
    architecture: str = "desk_cnn"


@dataclass
class OptimizerCfg:
    kind: str = "sgd-momentum"
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64

    def validate(self):
        if self.kind not in ("sgd", "sgd-momentum"):
            raise ConfigurationError(f"unknown optimizer kind {self.kind!r}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")


@dataclass
class TrainCfg:
    trainer: str = "undefended"
    epochs: int = 20
    loss: str = "cross-entropy"

    def validate(self):
        if self.trainer not in ("undefended", "hasnet", "gradshape"):
            raise ConfigurationError(f"unknown trainer {self.trainer!r}")
        if self.loss not in ("cross-entropy", "squared-error"):
            raise ConfigurationError(f"unknown loss {self.loss!r}")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be at least 1")


@dataclass
class HasnetCfg:
    s: float = 0.3
    d: float = 0.4
    tau: float = 1e-08
    heal_epochs: int = 2
    max_iterations: int = 15
    policy: str = "policy2"
    checkpoint_every: int = 0

    def validate(self):
        if not 0.0 < self.s <= 1.0:
            raise ConfigurationError(f"s must be in (0, 1], got {self.s}")
        if not 0.0 <= self.d <= 1.0:
            raise ConfigurationError(f"d must be in [0, 1], got {self.d}")
        if self.tau < 0:
            raise ConfigurationError("tau must be nonnegative")
        if self.heal_epochs < 1:
            raise ConfigurationError("heal_epochs must be at least 1")
        if self.max_iterations < 1:
            raise ConfigurationError("max_iterations must be at least 1")
        if self.policy not in ("policy1", "policy2"):
            raise ConfigurationError(f"unknown policy {self.policy!r}")
        if self.checkpoint_every < 0:
            raise ConfigurationError("checkpoint_every must be nonnegative")


@dataclass
class GradshapeCfg:
    clip_norm: float = 4.0
    noise_multiplier: float = 0.01
    microbatch: int = 1

    def validate(self):
        if self.clip_norm <= 0:
            raise ConfigurationError("clip_norm must be positive")
        if self.noise_multiplier < 0:
            raise ConfigurationError("noise_multiplier must be nonnegative")
        if self.microbatch < 1:
            raise ConfigurationError("microbatch must be at least 1")


@dataclass
class StripCfg:
    enabled: bool = False
    k: int = 100
    frr: float = 0.01
    blend: float = 0.5
    calibration_count: int = 200
    clean_count: int = 200
    poison_count: int = 200

    def validate(self):
        if self.k < 1:
            raise ConfigurationError("k must be at least 1")
        if not 0.0 < self.frr < 1.0:
            raise ConfigurationError(f"frr must be in (0, 1), got {self.frr}")
        if not 0.0 < self.blend < 1.0:
            raise ConfigurationError(f"blend must be in (0, 1), got {self.blend}")
        if min(self.calibration_count, self.clean_count, self.poison_count) < 1:
            raise ConfigurationError("strip set sizes must be positive")


@dataclass
class EvalCfg:
    baseline_accuracy: float | None = None


@dataclass
class ExperimentConfig:
    run: RunCfg = field(default_factory=RunCfg)
    data: DataCfg = field(default_factory=DataCfg)
    split: SplitCfg = field(default_factory=SplitCfg)
    poison: PoisonCfg = field(default_factory=PoisonCfg)
    model: ModelCfg = field(default_factory=ModelCfg)
    optimizer: OptimizerCfg = field(default_factory=OptimizerCfg)
    train: TrainCfg = field(default_factory=TrainCfg)
    hasnet: HasnetCfg = field(default_factory=HasnetCfg)
    gradshape: GradshapeCfg = field(default_factory=GradshapeCfg)
    strip: StripCfg = field(default_factory=StripCfg)
    eval: EvalCfg = field(default_factory=EvalCfg)

    def sections(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def validate(self):
        for section in self.sections().values():
            if hasattr(section, "validate"):
                section.validate()
        return self


_TYPES = {}
for _section_cls in (RunCfg, DataCfg, SplitCfg, PoisonCfg, ModelCfg, OptimizerCfg,
                     TrainCfg, HasnetCfg, GradshapeCfg, StripCfg, EvalCfg):
    for _f in fields(_section_cls):
        _TYPES[(_section_cls, _f.name)] = _f.type


def _parse_value(raw, type_name, where):
    raw = raw.strip()
    if type_name == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigurationError(f"{where}: expected an integer, got {raw!r}")
    if type_name == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigurationError(f"{where}: expected a number, got {raw!r}")
    if type_name == "bool":
        if raw.lower() in _TRUE:
            return True
        if raw.lower() in _FALSE:
            return False
        raise ConfigurationError(f"{where}: expected true/false, got {raw!r}")
    if type_name == "float | None":
        if raw.lower() == "none":
            return None
        try:
            return float(raw)
        except ValueError:
            raise ConfigurationError(f"{where}: expected a number or none, got {raw!r}")
    return raw


def _format_value(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def load_config(path=None, overrides=None):
    """Read a config file, apply (section, key) -> raw-string overrides, and
    return a fully materialized, validated ExperimentConfig.

    Unknown sections or keys are fatal; so are malformed values.
    """
    cfg = ExperimentConfig()
    sections = cfg.sections()
    raw = {}
    if path is not None:
        cp = configparser.ConfigParser()
        try:
            with open(path) as fh:
                cp.read_string(fh.read())
        except configparser.Error as exc:
            raise ConfigurationError(f"cannot parse {path}: {exc}") from exc
        for sec in cp.sections():
            if sec not in sections:
                raise ConfigurationError(f"unknown config section [{sec}]")
            for key, value in cp.items(sec):
                if not hasattr(sections[sec], key):
                    raise ConfigurationError(f"unknown config key {key!r} in [{sec}]")
                raw[(sec, key)] = value
    for (sec, key), value in (overrides or {}).items():
        if sec not in sections or not hasattr(sections[sec], key):
            raise ConfigurationError(f"unknown config override [{sec}] {key}")
        raw[(sec, key)] = value
    for (sec, key), value in raw.items():
        section = sections[sec]
        type_name = _TYPES[(type(section), key)]
        setattr(section, key, _parse_value(value, type_name, f"[{sec}] {key}"))
    return cfg.validate()


def config_text(cfg):
    """Canonical INI serialization with every field materialized."""
    lines = []
    for name, section in cfg.sections().items():
        lines.append(f"[{name}]")
        for f in fields(section):
            lines.append(f"{f.name} = {_format_value(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def save_config(cfg, path):
    with open(path, "w") as fh:
        fh.write(config_text(cfg))
