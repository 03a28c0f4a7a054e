"""Backbone -> per-modality SMA encoders -> AFM -> regression head."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import numerics as nx
from .afm import FeaturePair, FusionGate, fuse, sum_fusion
from .errors import ConfigError, InputError, LoadError
from .loss_metrics import DensityMap
from .nn import Conv2d, Module
from .numerics import Tensor
from .sma import AttentionConfig, Encoder
from .spatial import TokenGrid, pairwise_distance

CHECKPOINT_FORMAT = "dualmod-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
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

    def __post_init__(self):
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        self.head_channels = tuple(int(c) for c in self.head_channels)
        if not self.backbone_channels or len(self.head_channels) != 2:
            raise ConfigError("need >= 1 backbone stage and exactly 2 head conv widths")
        if self.downsample_factor != 2 ** len(self.backbone_channels):
            raise ConfigError(
                f"downsample_factor {self.downsample_factor} does not match "
                f"{len(self.backbone_channels)} stride-2 stages"
            )
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        self.attention_config()

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(
            model_dim=self.model_dim,
            num_heads=self.num_heads,
            num_layers=self.num_layers,
            ffn_mult=self.ffn_mult,
            learnable_decay=self.learnable_decay,
            fixed_scale=self.fixed_scale,
            fixed_bias=self.fixed_bias,
            leaky_slope=self.leaky_slope,
            mask_mode=self.mask_mode,
            sma_enabled=self.sma_enabled,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        d["head_channels"] = list(self.head_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Prediction:
    density: DensityMap
    fusion_w: Optional[float]
    weight: Optional[Tensor] = None


class Backbone(Module):
    """conv3x3 + ReLU + 2x2 max-pool per stage; shared by both modalities."""

    def __init__(self, channels: tuple, rng: np.random.Generator):
        super().__init__()
        self.stages = []
        c_in = 3
        for i, c in enumerate(channels):
            self.stages.append(self.add_child(f"conv{i}", Conv2d(c_in, c, 3, rng)))
            c_in = c
        self.factor = 2 ** len(channels)

    def __call__(self, image: Tensor) -> Tensor:
        if image.data.ndim != 3 or image.shape[0] not in (1, 3):
            raise InputError(f"image must be 1 or 3 x H x W, got {image.shape}")
        _, h, w = image.shape
        if h < self.factor or w < self.factor:
            raise InputError(f"image {h}x{w} smaller than {self.factor}x{self.factor}")
        x = image
        if x.shape[0] == 1:
            x = nx.constant(np.repeat(x.data, 3, axis=0))
        for conv in self.stages:
            x = nx.max_pool2d(nx.relu(conv(x)))
        return x


class ModalityEncoder(Module):
    """1x1 channel embedding followed by the transformer encoder over cells."""

    def __init__(self, c_in: int, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.embed = Conv2d(c_in, cfg.model_dim, 1, rng)
        self.encoder = Encoder(cfg.attention_config(), rng)

    def __call__(self, feat: Tensor, S: Optional[Tensor]) -> Tensor:
        x = self.embed(feat)
        d, h, w = x.shape
        tokens = nx.transpose(nx.reshape(x, (d, h * w)))
        tokens = self.encoder(tokens, S)
        return nx.reshape(nx.transpose(tokens), (d, h, w))


class RegressionHead(Module):
    def __init__(self, c_in: int, widths: tuple, rng: np.random.Generator, bias: float = 0.0):
        super().__init__()
        self.conv1 = Conv2d(c_in, widths[0], 3, rng)
        self.conv2 = Conv2d(widths[0], widths[1], 3, rng)
        self.conv3 = Conv2d(widths[1], 1, 1, rng)
        # near-zero output layer: every cell starts in the active ReLU region
        self.conv3.weight.data *= 1e-3
        self.conv3.bias.data[:] = bias

    def __call__(self, x: Tensor) -> Tensor:
        x = nx.relu(self.conv1(x))
        x = nx.relu(self.conv2(x))
        return nx.relu(self.conv3(x))


class DualModNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c = cfg.backbone_channels[-1]
        self.backbone = Backbone(cfg.backbone_channels, rng)
        self.rgb_encoder = ModalityEncoder(c, cfg, rng)
        self.thermal_encoder = ModalityEncoder(c, cfg, rng)
        self.gate = FusionGate(cfg.model_dim, rng, cfg.gate_reduction) if cfg.afm_enabled else None
        self.head = RegressionHead(cfg.model_dim, cfg.head_channels, rng, cfg.density_bias)
        self.name_parameters()

    def encode(self, rgb: Tensor, thermal: Tensor) -> FeaturePair:
        f_r = self.backbone(rgb)
        f_t = self.backbone(thermal)
        _, h, w = f_r.shape
        S = pairwise_distance(TokenGrid(h, w)) if self.cfg.sma_enabled else None
        return FeaturePair(self.rgb_encoder(f_r, S), self.thermal_encoder(f_t, S))

    def __call__(self, rgb, thermal) -> Prediction:
        rgb = rgb if isinstance(rgb, Tensor) else nx.constant(np.asarray(rgb, dtype=np.float64))
        thermal = (
            thermal if isinstance(thermal, Tensor) else nx.constant(np.asarray(thermal, dtype=np.float64))
        )
        if rgb.data.ndim != 3 or thermal.data.ndim != 3 or rgb.shape[1:] != thermal.shape[1:]:
            raise InputError(f"rgb {rgb.shape} and thermal {thermal.shape} are not aligned")
        pair = self.encode(rgb, thermal)
        if self.gate is not None:
            w = self.gate(pair)
            fused = fuse(pair, w)
            w_val = w.item()
        else:
            w = None
            fused = sum_fusion(pair)
            w_val = None
        density = self.head(fused)
        return Prediction(DensityMap(density, self.cfg.downsample_factor), w_val, w)

    def decay_params(self) -> dict:
        """``{"rgb": [layer0, layer1, ...], "thermal": [...]}`` of DecayParams."""
        return {
            "rgb": self.rgb_encoder.encoder.decay_params(),
            "thermal": self.thermal_encoder.encoder.decay_params(),
        }


def forward(model: DualModNet, rgb, thermal) -> Prediction:
    return model(rgb, thermal)


# ---------------------------------------------------------------------------
# checkpoints: <dir>/manifest.json plus one CSV of values per parameter


def save_checkpoint(model: DualModNet, path, extra: Optional[dict] = None) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, p in model.named_parameters():
        fname = name.replace("/", "_") + ".csv"
        with open(root / fname, "w") as fh:
            fh.write("".join(f"{v!r}\n" for v in p.data.ravel().tolist()))
        entries.append({"name": name, "shape": list(p.shape), "file": fname})
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "parameters": entries,
    }
    if extra:
        manifest["extra"] = extra
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> dict:
    mpath = Path(path) / "manifest.json"
    if not mpath.is_file():
        raise LoadError(f"{path}: not a checkpoint (missing manifest.json)")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise LoadError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise LoadError(f"{path}: unsupported checkpoint version {manifest.get('version')!r}")
    return manifest


def load_parameters(model: DualModNet, path) -> None:
    """Copy checkpoint values into ``model``, refusing any shape mismatch."""
    manifest = read_manifest(path)
    stored = {e["name"]: e for e in manifest["parameters"]}
    problems = []
    params = dict(model.named_parameters())
    for name, p in params.items():
        e = stored.get(name)
        if e is None:
            problems.append(f"{name}: missing from checkpoint")
        elif tuple(e["shape"]) != p.shape:
            problems.append(f"{name}: checkpoint {tuple(e['shape'])} vs model {p.shape}")
    for name in stored:
        if name not in params:
            problems.append(f"{name}: not a model parameter")
    if problems:
        raise LoadError("incompatible checkpoint:\n  " + "\n  ".join(problems))
    for name, p in params.items():
        e = stored[name]
        values = np.loadtxt(Path(path) / e["file"], dtype=np.float64, ndmin=1)
        if values.size != p.size:
            raise LoadError(f"{name}: expected {p.size} values, file has {values.size}")
        p.data[...] = values.reshape(p.shape)
        p.zero_grad()


def load_checkpoint(path, cfg: Optional[ModelConfig] = None) -> DualModNet:
    """Rebuild the model stored at ``path``; ``cfg`` overrides the stored config."""
    manifest = read_manifest(path)
    if cfg is None:
        cfg = ModelConfig.from_dict(manifest["config"])
    model = DualModNet(cfg)
    load_parameters(model, path)
    return model
