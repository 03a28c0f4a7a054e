"""Spatially modulated multi-head attention with a learnable power-law decay.

Each head owns two raw scalars.  The effective decay base is
``sigmoid(beta_scale)`` in (0, 1) and the proximity threshold is
``softplus(beta_bias)`` > 0.  For a token pair at grid distance ``d`` the mask
is ``base ** leaky_relu(d - threshold)``, which stays near 1 inside the
threshold and decays geometrically outside it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, DimensionError
from .nn import LayerNorm, Linear, Module
from .numerics import Parameter, Tensor

MASK_MODES = ("multiply_logits", "add_log_mask")

Scalar = Union[float, Tensor]


@dataclass
class AttentionConfig:
    model_dim: int = 64
    num_heads: int = 8
    num_layers: int = 2
    ffn_mult: int = 4
    learnable_decay: bool = True
    fixed_scale: float = 0.1
    fixed_bias: float = 0.1
    leaky_slope: float = 0.01
    mask_mode: str = "multiply_logits"
    sma_enabled: bool = True

    def __post_init__(self):
        if self.num_heads < 1 or self.model_dim % self.num_heads:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")
        if not self.learnable_decay and not (0.0 < self.fixed_scale < 1.0 and self.fixed_bias > 0):
            raise ConfigError("fixed decay needs 0 < fixed_scale < 1 and fixed_bias > 0")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


def inverse_sigmoid(y):
    y = np.asarray(y, dtype=np.float64)
    return np.log(y) - np.log1p(-y)


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return np.log(np.expm1(y))


class DecayParams(Module):
    """Per-head raw decay parameters.

    Learnable heads start with effective bases spread linearly over
    [0.1, 0.9] and a common threshold of 1.0 cell.  In fixed mode the
    effective values come straight from the config and carry no gradient.
    """

    def __init__(
        self,
        num_heads: int,
        leaky_slope: float = 0.01,
        learnable: bool = True,
        fixed_scale: float = 0.1,
        fixed_bias: float = 0.1,
    ):
        super().__init__()
        self.num_heads = num_heads
        self.leaky_slope = leaky_slope
        self.learnable = learnable
        if learnable:
            targets = np.linspace(0.1, 0.9, num_heads) if num_heads > 1 else np.array([0.5])
            self.beta_scale = Parameter(inverse_sigmoid(targets))
            self.beta_bias = Parameter(np.full(num_heads, float(inverse_softplus(1.0))))
        else:
            self._fixed = (
                nx.constant(np.full(num_heads, float(fixed_scale))),
                nx.constant(np.full(num_heads, float(fixed_bias))),
            )

    def effective(self) -> tuple[Tensor, Tensor]:
        """(base, threshold) per head as differentiable tensors of shape (H,)."""
        if not self.learnable:
            return self._fixed
        return nx.sigmoid(self.beta_scale), nx.softplus(self.beta_bias)

    def effective_values(self) -> tuple[np.ndarray, np.ndarray]:
        with nx.no_grad():
            s, b = self.effective()
        return s.data.copy(), b.data.copy()


def effective_params(decay: DecayParams) -> tuple[Tensor, Tensor]:
    return decay.effective()


def decay_mask(S: Tensor, scale: Scalar, bias: Scalar, slope: float = 0.01) -> Tensor:
    """Mask ``scale ** leaky_relu(S - bias)`` for one head."""
    scale = scale if isinstance(scale, Tensor) else nx.constant(float(scale))
    bias = bias if isinstance(bias, Tensor) else nx.constant(float(bias))
    s = float(scale.data.reshape(()))
    if not 0.0 < s < 1.0:
        raise ContractError(f"decay base must lie in (0, 1), got {s!r}")
    shifted = nx.leaky_relu(nx.sub(S, bias), slope)
    return nx.exp(nx.mul(shifted, nx.log(scale)))


def log_decay_mask(S: Tensor, scale: Scalar, bias: Scalar, slope: float = 0.01) -> Tensor:
    """``log`` of :func:`decay_mask`, for the additive masking mode."""
    scale = scale if isinstance(scale, Tensor) else nx.constant(float(scale))
    bias = bias if isinstance(bias, Tensor) else nx.constant(float(bias))
    shifted = nx.leaky_relu(nx.sub(S, bias), slope)
    return nx.mul(shifted, nx.log(scale))


def decay_masks(S: Tensor, scales: Tensor, biases: Tensor, slope: float = 0.01, log: bool = False) -> Tensor:
    """All heads at once: ``H x N x N`` stack of :func:`decay_mask` (or its log).

    Fused into one graph node because the per-head version costs ~5 ops per
    head and attention runs this every layer.
    """
    if scales.data.ndim != 1 or scales.shape != biases.shape or S.data.ndim != 2:
        raise DimensionError(f"decay_masks: S {S.shape}, scales {scales.shape}, biases {biases.shape}")
    s = scales.data
    if not np.all((s > 0.0) & (s < 1.0)):
        raise ContractError(f"decay bases must lie in (0, 1), got {s!r}")
    ln_s = np.log(s)[:, None, None]
    u = S.data[None] - biases.data[:, None, None]
    du = np.where(u > 0.0, 1.0, slope)
    r = np.where(u > 0.0, u, slope * u)
    L = r * ln_s
    out = L if log else np.exp(L)

    def bw(g):
        gL = g if log else g * out
        g_s = (gL * r).sum(axis=(1, 2)) / s
        g_u = gL * ln_s * du
        return g_u.sum(axis=0), g_s, -g_u.sum(axis=(1, 2))

    return nx._result(out, (S, scales, biases), bw)


def attention_weights(
    Q: Tensor, K: Tensor, M: Optional[Tensor] = None, mask_mode: str = "multiply_logits"
) -> Tensor:
    """Row-stochastic attention matrix.

    In ``multiply_logits`` mode ``M`` is the decay mask and multiplies the
    scaled logits.  In ``add_log_mask`` mode ``M`` must be the log-mask and is
    added to them.  ``M=None`` gives vanilla attention.
    """
    if Q.data.ndim != 2 or Q.shape != K.shape:
        raise DimensionError(f"attention: Q {Q.shape} and K {K.shape} must match")
    n, dk = Q.shape
    logits = nx.scale(nx.matmul(Q, nx.transpose(K)), 1.0 / math.sqrt(dk))
    if M is not None:
        if M.shape != (n, n):
            raise DimensionError(f"attention: mask {M.shape} for {n} tokens")
        if mask_mode == "multiply_logits":
            logits = nx.mul(logits, M)
        elif mask_mode == "add_log_mask":
            logits = nx.add(logits, M)
        else:
            raise ConfigError(f"unknown mask_mode {mask_mode!r}")
    return nx.softmax_rows(logits)


def modulated_attention(
    Q: Tensor, K: Tensor, V: Tensor, M: Optional[Tensor] = None, mask_mode: str = "multiply_logits"
) -> Tensor:
    if V.data.ndim != 2 or V.shape[0] != Q.shape[0]:
        raise DimensionError(f"attention: V {V.shape} for Q {Q.shape}")
    return nx.matmul(attention_weights(Q, K, M, mask_mode), V)


class EncoderLayer(Module):
    """Post-norm transformer encoder layer whose attention heads use SMA."""

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        super().__init__()
        d = cfg.model_dim
        self.cfg = cfg
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.out = Linear(d, d, rng)
        self.norm1 = LayerNorm(d)
        self.ff1 = Linear(d, cfg.ffn_mult * d, rng)
        self.ff2 = Linear(cfg.ffn_mult * d, d, rng)
        self.norm2 = LayerNorm(d)
        self.decay: Optional[DecayParams] = None
        if cfg.sma_enabled:
            self.decay = DecayParams(
                cfg.num_heads,
                cfg.leaky_slope,
                cfg.learnable_decay,
                cfg.fixed_scale,
                cfg.fixed_bias,
            )

    def masks(self, S: Tensor) -> Optional[Tensor]:
        """``H x N x N`` masks (log-masks in ``add_log_mask`` mode) for distances ``S``."""
        if self.decay is None:
            return None
        scales, biases = self.decay.effective()
        log = self.cfg.mask_mode == "add_log_mask"
        return decay_masks(S, scales, biases, self.decay.leaky_slope, log)

    def attention(self, x: Tensor, S: Optional[Tensor]) -> Tensor:
        """Multi-head attention block output (before the residual).

        All heads are computed together; per head this is exactly
        :func:`modulated_attention` on that head's column slice.
        """
        if x.data.ndim != 2 or x.shape[1] != self.cfg.model_dim:
            raise DimensionError(f"encoder expects N x {self.cfg.model_dim}, got {x.shape}")
        n = x.shape[0]
        if S is not None and S.shape != (n, n):
            raise DimensionError(f"distance matrix {S.shape} for {n} tokens")
        heads, dk = self.cfg.num_heads, self.cfg.head_dim
        q, k, v = (nx.reshape(f(x), (n, heads, dk)) for f in (self.q, self.k, self.v))
        logits = nx.scale(nx.einsum("nhd,mhd->hnm", q, k), 1.0 / math.sqrt(dk))
        M = self.masks(S) if S is not None else None
        if M is not None:
            if self.cfg.mask_mode == "multiply_logits":
                logits = nx.mul(logits, M)
            elif self.cfg.mask_mode == "add_log_mask":
                logits = nx.add(logits, M)
            else:
                raise ConfigError(f"unknown mask_mode {self.cfg.mask_mode!r}")
        A = nx.softmax_rows(logits)
        merged = nx.reshape(nx.einsum("hnm,mhd->nhd", A, v), (n, self.cfg.model_dim))
        return self.out(merged)

    def __call__(self, x: Tensor, S: Optional[Tensor]) -> Tensor:
        x = self.norm1(nx.add(x, self.attention(x, S)))
        ff = self.ff2(nx.relu(self.ff1(x)))
        return self.norm2(nx.add(x, ff))


class Encoder(Module):
    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.layers = [
            self.add_child(f"layer{i}", EncoderLayer(cfg, rng)) for i in range(cfg.num_layers)
        ]

    def __call__(self, x: Tensor, S: Optional[Tensor]) -> Tensor:
        for layer in self.layers:
            x = layer(x, S)
        return x

    def decay_params(self) -> list[DecayParams]:
        return [layer.decay for layer in self.layers if layer.decay is not None]


def multi_head_forward(x: Tensor, layer: EncoderLayer, S: Optional[Tensor]) -> Tensor:
    return layer(x, S)


def decay_curve(scale: float, bias: float, distances: np.ndarray, slope: float = 0.01) -> np.ndarray:
    shifted = distances - bias
    shifted = np.where(shifted > 0, shifted, slope * shifted)
    return np.exp(shifted * np.log(scale))


def dump_decay_curves(
    decay: DecayParams, max_dist: float, step: float
) -> list[tuple[int, float, float]]:
    """Rows of (head, distance, mask value) sampled on [0, max_dist]."""
    if step <= 0:
        raise ConfigError(f"step must be positive, got {step}")
    n = int(math.floor(max_dist / step + 1e-9)) + 1
    dist = np.arange(n) * step
    scales, biases = decay.effective_values()
    rows = []
    for h in range(decay.num_heads):
        m = decay_curve(scales[h], biases[h], dist, decay.leaky_slope)
        rows.extend((h, float(d), float(v)) for d, v in zip(dist, m))
    return rows


def write_decay_csv(rows, path) -> None:
    with open(path, "w") as fh:
        fh.write("head,distance,mask_value\n")
        for h, d, m in rows:
            fh.write(f"{h},{d!r},{m!r}\n")
