"""Point-supervised counting loss and GAME / MAE / RMSE evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError
from .numerics import Tensor


@dataclass
class PointAnnotations:
    """Head positions in pixel coordinates, origin at the top-left."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = np.zeros((0, 2))
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ConfigError(f"points must be an M x 2 array, got shape {pts.shape}")
        self.points = pts

    @property
    def count(self) -> int:
        return len(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def check_bounds(self, height: int, width: int) -> None:
        x, y = self.points[:, 0], self.points[:, 1]
        if np.any((x < 0) | (x >= width) | (y < 0) | (y >= height)):
            raise ConfigError(f"annotation outside {width}x{height} image")


@dataclass
class DensityMap:
    values: Tensor  # 1 x h x w
    downsample: int

    @property
    def count(self) -> float:
        return float(self.values.data.sum())

    @property
    def grid(self) -> np.ndarray:
        return self.values.data[0]


def cell_centers(h: int, w: int, downsample: int) -> np.ndarray:
    """Pixel-space (x, y) centres of an h x w density grid, row-major."""
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([(xs.ravel() + 0.5) * downsample, (ys.ravel() + 0.5) * downsample], axis=1)


def posterior_weights(centers: np.ndarray, points: np.ndarray, sigma: float) -> np.ndarray:
    """M x cells matrix; column ``c`` is the posterior over annotations at cell ``c``."""
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
    logp = -d2 / (2.0 * sigma * sigma)
    logp -= logp.max(axis=0, keepdims=True)
    p = np.exp(logp)
    return p / p.sum(axis=0, keepdims=True)


def bayesian_loss(
    density: DensityMap,
    ann: PointAnnotations,
    sigma: float = 8.0,
    empty_penalty: float = 0.0,
) -> Tensor:
    """Sum over annotations of ``|1 - <posterior_i, density>|``.

    With no annotations the loss is zero, plus ``empty_penalty * sum(density)``
    when that weight is positive.
    """
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    d = density.values
    _, h, w = d.shape
    flat = nx.reshape(d, (h * w, 1))
    if ann.count == 0:
        loss = nx.scale(nx.sum_all(flat), 0.0)
        if empty_penalty > 0:
            loss = nx.scale(nx.sum_all(flat), empty_penalty)
        return loss
    P = posterior_weights(cell_centers(h, w, density.downsample), ann.points, sigma)
    expected = nx.matmul(nx.constant(P), flat)
    return nx.sum_all(nx.absolute(nx.sub(nx.constant(1.0), expected)))


# ---------------------------------------------------------------------------
# GAME


def region_index(coords: np.ndarray, extent: float, level: int) -> np.ndarray:
    """Region index along one axis for ``2**level`` equal half-open slices."""
    k = 2 ** level
    idx = np.floor(coords * k / extent).astype(np.int64)
    return np.clip(idx, 0, k - 1)


def region_counts(
    xy: np.ndarray, weights: np.ndarray, height: int, width: int, level: int
) -> np.ndarray:
    k = 2 ** level
    out = np.zeros((k, k))
    if len(xy) == 0:
        return out
    if level == 0:
        # one region; a plain sum keeps GAME(0) bit-identical to the count error
        out[0, 0] = np.sum(weights)
        return out
    ix = region_index(xy[:, 0], width, level)
    iy = region_index(xy[:, 1], height, level)
    np.add.at(out, (iy, ix), weights)
    return out


def game_image(
    density: np.ndarray,
    downsample: int,
    points: np.ndarray,
    height: int,
    width: int,
    level: int,
) -> float:
    """Sum of absolute regional count errors for one image."""
    if level < 0:
        raise ConfigError(f"GAME level must be >= 0, got {level}")
    h, w = density.shape
    centers = cell_centers(h, w, downsample)
    pred = region_counts(centers, density.ravel(), height, width, level)
    gt = region_counts(np.asarray(points).reshape(-1, 2), np.ones(len(points)), height, width, level)
    return float(np.abs(pred - gt).sum())


def game(per_image: Sequence[float]) -> float:
    if len(per_image) == 0:
        raise ConfigError("GAME over an empty set is undefined")
    return float(np.mean(per_image))


def rmse(preds: Sequence[float], gts: Sequence[float]) -> float:
    preds, gts = np.asarray(preds, float), np.asarray(gts, float)
    if preds.size == 0 or preds.shape != gts.shape:
        raise ConfigError("rmse needs equal-length, non-empty count lists")
    return float(math.sqrt(np.mean((preds - gts) ** 2)))


def mae(preds: Sequence[float], gts: Sequence[float]) -> float:
    preds, gts = np.asarray(preds, float), np.asarray(gts, float)
    if preds.size == 0 or preds.shape != gts.shape:
        raise ConfigError("mae needs equal-length, non-empty count lists")
    return float(np.mean(np.abs(preds - gts)))


@dataclass
class ImageResult:
    image_id: str
    count_pred: float
    count_gt: float
    game: list
    fusion_w: Optional[float] = None


@dataclass
class MetricReport:
    game: list
    rmse: float
    mae: float
    n_images: int
    images: list = field(default_factory=list)


def evaluate_image(
    image_id: str,
    density: np.ndarray,
    downsample: int,
    points: np.ndarray,
    height: int,
    width: int,
    fusion_w: Optional[float] = None,
    levels: int = 4,
) -> ImageResult:
    g = [game_image(density, downsample, points, height, width, L) for L in range(levels)]
    return ImageResult(image_id, float(density.sum()), float(len(points)), g, fusion_w)


def aggregate(results: Sequence[ImageResult]) -> MetricReport:
    if not results:
        raise ConfigError("cannot build a metric report from zero images")
    results = sorted(results, key=lambda r: r.image_id)
    levels = len(results[0].game)
    g = [game([r.game[L] for r in results]) for L in range(levels)]
    preds = [r.count_pred for r in results]
    gts = [r.count_gt for r in results]
    return MetricReport(g, rmse(preds, gts), mae(preds, gts), len(results), list(results))


CSV_HEADER = "image_id,count_pred,count_gt,game0,game1,game2,game3,fusion_w"


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def report_to_csv(report: MetricReport) -> str:
    """Per-image rows followed by an ``ALL`` row of set-level means."""
    lines = [CSV_HEADER]
    for r in report.images:
        lines.append(
            ",".join([r.image_id, _fmt(r.count_pred), _fmt(r.count_gt)]
                     + [_fmt(x) for x in r.game] + [_fmt(r.fusion_w)])
        )
    ws = [r.fusion_w for r in report.images if r.fusion_w is not None]
    mean_w = float(np.mean(ws)) if ws else None
    mean_pred = float(np.mean([r.count_pred for r in report.images]))
    mean_gt = float(np.mean([r.count_gt for r in report.images]))
    lines.append(
        ",".join(["ALL", _fmt(mean_pred), _fmt(mean_gt)]
                 + [_fmt(x) for x in report.game] + [_fmt(mean_w)])
    )
    return "\n".join(lines) + "\n"


def report_summary(report: MetricReport) -> str:
    """``key = value`` lines with the headline numbers."""
    rows = [("n_images", report.n_images)]
    rows += [(f"game{L}", report.game[L]) for L in range(len(report.game))]
    rows += [("mae", report.mae), ("rmse", report.rmse)]
    return "".join(f"{k} = {v!r}\n" for k, v in rows)


def parse_report_csv(text: str) -> tuple[list[dict], dict]:
    """Inverse of :func:`report_to_csv`: (per-image rows, aggregate row)."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split(",")
    rows = []
    for ln in lines[1:]:
        vals = ln.split(",")
        row = {"image_id": vals[0]}
        for k, v in zip(header[1:], vals[1:]):
            row[k] = float(v) if v else None
        rows.append(row)
    agg = [r for r in rows if r["image_id"] == "ALL"]
    return [r for r in rows if r["image_id"] != "ALL"], (agg[0] if agg else {})
