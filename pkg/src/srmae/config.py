"""Run configuration: flat key=value files with dotted namespaces.

A config file is plain text, one ``key = value`` per line, ``#`` comments.
The same format is emitted into every run manifest, so a manifest can be
fed back in as a config file.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .errors import ConfigurationError
from .model import SrmaeConfig

MODES = ("pretrain", "finetune", "eval")
DATA_KINDS = ("synthetic", "raw-tensor-dir", "netpbm-dir", "idx-pair")


@dataclass
class DataConfig:
    kind: str = "synthetic"
    path: str = ""
    count: int = 2000
    resolution: int = 32
    seed: int = 0
    val_fraction: float = 0.2

    def validate(self):
        if self.kind not in DATA_KINDS:
            raise ConfigurationError(f"data.kind must be one of {DATA_KINDS}, got {self.kind!r}")
        if self.kind != "synthetic" and not self.path:
            raise ConfigurationError(f"data.kind {self.kind!r} requires data.path")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigurationError(f"data.val_fraction must be in [0,1), got {self.val_fraction}")
        return self


@dataclass
class TrainConfig:
    mode: str = "pretrain"
    epochs: int = 30
    batch_size: int = 64
    base_lr: float = 1e-3
    min_lr: float = 1e-5
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95  # MAE pretrain default; fine-tune runs use 0.999
    eps: float = 1e-8
    warmup_epochs: int = 5
    seed: int = 0
    eval_resolution: int = 0  # 0 = model input extent
    ckpt_every: int = 10
    flip_prob: float = 0.5
    crop: bool = False
    crop_scale_min: float = 0.2
    crop_scale_max: float = 1.0
    model: SrmaeConfig = field(default_factory=SrmaeConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"train.mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("train.epochs and train.batch_size must be >= 1")
        if self.warmup_epochs >= self.epochs:
            raise ConfigurationError(
                f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})")
        if self.base_lr <= 0:
            raise ConfigurationError(f"base_lr must be positive, got {self.base_lr}")
        self.model.validate()
        self.data.validate()
        return self


def _bool(s):
    t = s.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _key_table():
    """dotted key -> (section attr or None, field name, parser)."""
    table = {}
    parsers = {int: int, float: float, bool: _bool, str: str.strip}
    for f in fields(TrainConfig):
        if f.name in ("model", "data"):
            continue
        table[f"train.{f.name}"] = (None, f.name, parsers[f.type if isinstance(f.type, type) else eval(f.type)])
    for f in fields(SrmaeConfig):
        table[f"model.{f.name}"] = ("model", f.name, parsers[f.type if isinstance(f.type, type) else eval(f.type)])
    for f in fields(DataConfig):
        table[f"data.{f.name}"] = ("data", f.name, parsers[f.type if isinstance(f.type, type) else eval(f.type)])
    return table


KEYS = _key_table()


def set_key(cfg, key, raw):
    if key not in KEYS:
        valid = ", ".join(sorted(KEYS))
        raise ConfigurationError(f"unknown config key {key!r}; valid keys: {valid}")
    section, name, parse = KEYS[key]
    try:
        value = parse(raw)
    except ValueError as e:
        raise ConfigurationError(f"cannot parse value for {key}: {e}") from e
    target = cfg if section is None else getattr(cfg, section)
    setattr(target, name, value)


def parse_config_text(text, cfg=None):
    cfg = cfg or TrainConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, raw = stripped.partition("=")
        try:
            set_key(cfg, key.strip(), raw.strip())
        except ConfigurationError as e:
            raise ConfigurationError(f"line {lineno}: {e}") from e
    return cfg


def load_config(path, overrides=()):
    """Parse a config file, apply --set overrides, validate."""
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigurationError(f"cannot read config {path}: {e}") from e
    cfg = parse_config_text(text)
    for ov in overrides:
        if "=" not in ov:
            raise ConfigurationError(f"override must be key=value, got {ov!r}")
        key, _, raw = ov.partition("=")
        set_key(cfg, key.strip(), raw.strip())
    # fine-tuning defaults to the MAE fine-tune beta2 unless set explicitly
    if cfg.mode != "pretrain" and "train.beta2" not in _explicit_keys(text, overrides):
        cfg.beta2 = 0.999
    return cfg.validate()


def _explicit_keys(text, overrides):
    keys = set()
    for line in text.splitlines():
        stripped = line.split("#", 1)[0].strip()
        if "=" in stripped:
            keys.add(stripped.partition("=")[0].strip())
    for ov in overrides:
        if "=" in ov:
            keys.add(ov.partition("=")[0].strip())
    return keys


def canonical_text(cfg):
    """Deterministic key=value rendering of a full TrainConfig."""
    lines = []
    for key in sorted(KEYS):
        section, name, _ = KEYS[key]
        target = cfg if section is None else getattr(cfg, section)
        value = getattr(target, name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
