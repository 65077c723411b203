"""Run configuration: flat key=value files, JSON run records, validation."""

import json
import os
from dataclasses import asdict, dataclass, fields

from .errors import ConfigError
from .icmlm import STRATEGIES
from .model import MODES, ModelConfig

SWEEP_AXES = ("alpha", "lam", "aqn_layers", "mlm_layers", "mask_strategy")
AXIS_ALIASES = {"lambda": "lam", "L": "aqn_layers", "D": "mlm_layers"}


@dataclass
class RunConfig:
    dataset: str = ""
    out: str = ""
    mode: str = "label2label"
    d: int = 64
    heads: int = 4
    ffn_hidden: int = 128
    aqn_layers: int = 1
    mlm_layers: int = 2
    alpha: float = 0.1
    lam: float = 1.0
    mask_strategy: str = "specific"
    weighting: str = "uniform"
    optimizer: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    scheduler: str = "cosine"
    patience: int = 4
    epochs: int = 40
    batch_size: int = 32
    seed: int = 0
    pos_embedding: bool = True
    conv_channels: str = "16,32"
    init_checkpoint: str = ""
    train_split: str = "train"
    val_split: str = "val"
    eval_split: str = "test"

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mask_strategy not in STRATEGIES:
            raise ConfigError(f"mask_strategy must be one of {STRATEGIES}")
        if self.weighting not in ("uniform", "exponential"):
            raise ConfigError("weighting must be uniform or exponential")
        if self.optimizer != "sgd":
            raise ConfigError("only the sgd optimizer is available")
        if self.scheduler not in ("cosine", "plateau", "constant"):
            raise ConfigError("scheduler must be cosine, plateau or constant")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.lam < 0:
            raise ConfigError("lam must be non-negative")
        if self.lr <= 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("need lr > 0, weight_decay >= 0, 0 <= momentum < 1")
        if self.grad_clip < 0:
            raise ConfigError("grad_clip must be non-negative (0 disables)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.d < 4 or self.d % 4 or self.d % self.heads:
            raise ConfigError("d must be a multiple of 4 and of heads")
        if self.mode != "fc_head" and self.aqn_layers < 1:
            raise ConfigError("aqn_layers (L) must be >= 1")
        if self.mlm_layers < 1:
            raise ConfigError("mlm_layers (D) must be >= 1")
        if self.mode == "two_stage" and not self.init_checkpoint:
            raise ConfigError("two_stage mode needs init_checkpoint from an aqn_only run")
        try:
            self.channels()
        except ValueError as exc:
            raise ConfigError(f"conv_channels: {exc}") from exc
        return self

    def channels(self):
        parts = tuple(int(c) for c in str(self.conv_channels).split(","))
        if len(parts) != 2 or min(parts) < 1:
            raise ValueError("need two positive ints")
        return parts

    def model_config(self, n_attributes, in_channels=1):
        return ModelConfig(
            n_attributes=n_attributes, d=self.d, heads=self.heads, ffn_hidden=self.ffn_hidden,
            aqn_layers=self.aqn_layers, mlm_layers=self.mlm_layers, mask_strategy=self.mask_strategy,
            mode=self.mode, in_channels=in_channels, conv_channels=self.channels(),
            pos_embedding=self.pos_embedding,
        )

    def to_dict(self):
        return asdict(self)

    def replace(self, **kw):
        d = self.to_dict()
        d.update(kw)
        return from_mapping(d)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key, value):
    typ = _TYPES[key]
    if isinstance(value, str):
        value = value.strip()
        if typ is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        try:
            return typ(value)
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot parse {value!r} as {typ.__name__}") from exc
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if typ is str and isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    if not isinstance(value, typ) or (typ is int and isinstance(value, bool)):
        raise ConfigError(f"{key}: expected {typ.__name__}, got {value!r}")
    return value


def from_mapping(mapping):
    """Build a RunConfig; unknown keys are rejected."""
    kw = {}
    for key, value in mapping.items():
        key = AXIS_ALIASES.get(key, key)
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        kw[key] = _coerce(key, value)
    cfg = RunConfig(**kw)
    env_seed = os.environ.get("L2L_SEED")
    if env_seed is not None and env_seed.strip():
        try:
            cfg.seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"L2L_SEED={env_seed!r} is not an int") from exc
    return cfg


def parse_kv(text, source="<config>"):
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def format_kv(mapping):
    return "".join(f"{k}={v}\n" for k, v in mapping.items())


def load_config_file(path):
    """Read either a key=value config or a run.json record."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if path.endswith(".json"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return dict(doc.get("config", doc))
    return parse_kv(text, path)
