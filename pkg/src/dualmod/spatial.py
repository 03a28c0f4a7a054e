"""Token grid geometry: pairwise distances between feature-map cells."""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .numerics import Tensor, constant


@dataclass(frozen=True)
class TokenGrid:
    """Feature-map cells flattened in row-major order; distances in cell units."""

    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ConfigError(f"token grid must be at least 1x1, got {self.rows}x{self.cols}")

    @property
    def n_tokens(self) -> int:
        return self.rows * self.cols

    def coord(self, token: int) -> tuple[int, int]:
        return divmod(token, self.cols)

    def index(self, row: int, col: int) -> int:
        return row * self.cols + col

    def coords(self) -> np.ndarray:
        t = np.arange(self.n_tokens)
        return np.stack([t // self.cols, t % self.cols], axis=1).astype(np.float64)


_cache: dict[tuple[int, int], np.ndarray] = {}
_lock = threading.Lock()


def _distances(grid: TokenGrid) -> np.ndarray:
    xy = grid.coords()
    diff = xy[:, None, :] - xy[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=-1))
    # exact symmetry regardless of summation order
    d = np.triu(d, 1)
    d = d + d.T
    d.setflags(write=False)
    return d


def distance_array(grid: TokenGrid) -> np.ndarray:
    """Cached read-only N x N Euclidean distance matrix for ``grid``."""
    key = (grid.rows, grid.cols)
    d = _cache.get(key)
    if d is None:
        with _lock:
            d = _cache.get(key)
            if d is None:
                d = _distances(grid)
                _cache[key] = d
    return d


def pairwise_distance(grid: TokenGrid) -> Tensor:
    """Distance matrix as a graph constant (no gradient flows into it)."""
    return constant(distance_array(grid))


def clear_cache() -> None:
    with _lock:
        _cache.clear()
