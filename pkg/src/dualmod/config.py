"""Run configuration and its flat ``key = value`` file format.

Grammar: one ``key = value`` per line; ``#`` starts a comment; blank lines
are ignored.  Booleans are ``true``/``false``, tuples are comma separated,
strings are taken verbatim (surrounding whitespace stripped).
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig

_TUPLE_ITEM = {
    "backbone_channels": int,
    "head_channels": int,
    "betas": float,
    "syn_people": int,
}


@dataclass
class RunConfig:
    # model
    backbone_channels: tuple = (16, 32, 64)
    downsample_factor: int = 8
    model_dim: int = 64
    num_heads: int = 8
    num_layers: int = 2
    ffn_mult: int = 4
    head_channels: tuple = (32, 16)
    gate_reduction: int = 4
    sma_enabled: bool = True
    afm_enabled: bool = True
    mask_mode: str = "multiply_logits"
    learnable_decay: bool = True
    fixed_scale: float = 0.1
    fixed_bias: float = 0.1
    leaky_slope: float = 0.01
    sigma: float = 8.0
    density_bias: float = 0.05
    # optimisation
    optimizer: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 10
    max_steps: int = 0
    seed: int = 0
    empty_penalty: float = 0.0
    crop: int = 0
    flip_prob: float = 0.0
    # data
    dataset: str = "synthetic"
    data_root: str = ""
    syn_seed: int = 0
    syn_train: int = 3
    syn_val: int = 0
    syn_size: int = 64
    syn_people: tuple = ()
    syn_people_min: int = 3
    syn_people_max: int = 12
    syn_brightness_min: float = 1.0
    syn_brightness_max: float = 1.0
    syn_blob_radius: float = 3.0
    # output
    output_dir: str = "runs/default"

    def __post_init__(self):
        for f in fields(self):
            if f.name in _TUPLE_ITEM:
                setattr(self, f.name, tuple(_TUPLE_ITEM[f.name](v) for v in getattr(self, f.name)))
        self.validate()

    def validate(self) -> None:
        if self.optimizer != "adam":
            raise ConfigError(f"optimizer must be 'adam', got {self.optimizer!r}")
        if self.lr <= 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("lr and eps must be positive, weight_decay non-negative")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.epochs < 0 or self.max_steps < 0:
            raise ConfigError("epochs and max_steps must be non-negative")
        if self.dataset not in ("synthetic", "disk"):
            raise ConfigError(f"dataset must be 'synthetic' or 'disk', got {self.dataset!r}")
        if self.dataset == "disk" and not self.data_root:
            raise ConfigError("dataset = disk needs data_root")
        if self.dataset == "synthetic" and self.syn_train < 1 and not self.syn_people:
            raise ConfigError("synthetic dataset needs syn_train >= 1")
        if self.syn_people_min < 0 or self.syn_people_max < self.syn_people_min:
            raise ConfigError("need 0 <= syn_people_min <= syn_people_max")
        if not 0.0 <= self.syn_brightness_min <= self.syn_brightness_max <= 1.0:
            raise ConfigError("need 0 <= syn_brightness_min <= syn_brightness_max <= 1")
        if self.crop < 0 or not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError("crop must be >= 0 and flip_prob in [0, 1]")
        self.model_config()

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: getattr(self, k) for k in names})


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(name: str, text: str, default):
    try:
        if name in _TUPLE_ITEM:
            return tuple(_TUPLE_ITEM[name](t) for t in text.split(",") if t.strip())
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError
            return low == "true"
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r}") from None


def serialize(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {_format(getattr(cfg, f.name))}\n" for f in fields(cfg))


def parse_overrides(pairs: dict, base: RunConfig | None = None) -> RunConfig:
    """Apply ``{key: text}`` onto ``base`` (default config when ``None``)."""
    base = base or RunConfig()
    defaults = {f.name: getattr(base, f.name) for f in fields(base)}
    values = dict(defaults)
    for key, text in pairs.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse(key, text.strip(), defaults[key])
    return RunConfig(**values)


def parse(text: str, base: RunConfig | None = None) -> RunConfig:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value
    return parse_overrides(pairs, base)


def load(path) -> RunConfig:
    return parse(Path(path).read_text())


def save(cfg: RunConfig, path) -> None:
    Path(path).write_text(serialize(cfg))
