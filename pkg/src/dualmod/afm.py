"""Scene-level gate that mixes RGB and thermal feature maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError
from .nn import Conv2d, Module
from .numerics import Tensor


@dataclass
class FeaturePair:
    rgb: Tensor
    thermal: Tensor

    def __post_init__(self):
        if self.rgb.shape != self.thermal.shape:
            raise DimensionError(
                f"modalities disagree: rgb {self.rgb.shape} vs thermal {self.thermal.shape}"
            )


class FusionGate(Module):
    """avgpool -> 1x1 conv -> ReLU -> 1x1 conv -> sigmoid, giving one scalar.

    Biases start at zero so an untrained gate weighs both modalities at 0.5
    whenever the pooled features are zero.
    """

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4):
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise ConfigError(f"channels {channels} not divisible by reduction {reduction}")
        self.conv1 = Conv2d(channels, channels // reduction, 1, rng)
        self.conv2 = Conv2d(channels // reduction, 1, 1, rng)

    def logit(self, pair: FeaturePair) -> Tensor:
        pooled = nx.global_avg_pool(nx.add(pair.rgb, pair.thermal))
        return self.conv2(nx.relu(self.conv1(pooled)))

    def __call__(self, pair: FeaturePair) -> Tensor:
        return nx.reshape(nx.sigmoid(self.logit(pair)), ())


def fusion_weight(pair: FeaturePair, gate: FusionGate) -> Tensor:
    return gate(pair)


def fuse(pair: FeaturePair, w: Tensor) -> Tensor:
    """``w * rgb + (1 - w) * thermal``; ``w`` is a scalar tensor."""
    return nx.add(nx.mul(pair.rgb, w), nx.mul(pair.thermal, nx.sub(nx.constant(1.0), w)))


def sum_fusion(pair: FeaturePair) -> Tensor:
    return nx.add(pair.rgb, pair.thermal)
