"""Adam training loop and dataset evaluation."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import config as config_io
from . import numerics as nx
from .config import RunConfig
from .data import SceneSpec, Sample, augment, generate_scene, load_dataset, synthetic_set
from .errors import ConfigError
from .loss_metrics import MetricReport, aggregate, bayesian_loss, evaluate_image
from .model import DualModNet, save_checkpoint
from .numerics import Parameter

LOG_HEADER = "epoch,loss,game0_val,fusion_w_mean"


class Adam:
    """Adam with decoupled weight decay."""

    def __init__(
        self,
        params: Sequence[Parameter],
        lr: float = 1e-3,
        betas: tuple = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def eval_threads() -> int:
    try:
        return max(1, int(os.environ.get("DUALMOD_THREADS", "1")))
    except ValueError:
        return 1


def predict(model: DualModNet, sample: Sample):
    with nx.no_grad():
        return model(sample.rgb, sample.thermal)


def evaluate(model: DualModNet, samples: Sequence[Sample], threads: Optional[int] = None) -> MetricReport:
    """GAME(0..3), MAE and RMSE over ``samples``; per-image results sorted by id."""

    def one(s: Sample):
        p = predict(model, s)
        return evaluate_image(
            s.id, p.density.grid, p.density.downsample, s.annotations.points,
            s.height, s.width, p.fusion_w,
        )

    threads = threads or eval_threads()
    if threads > 1 and len(samples) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, samples))
    else:
        results = [one(s) for s in samples]
    return aggregate(results)


def sample_loss(model: DualModNet, sample: Sample, cfg: RunConfig):
    pred = model(sample.rgb, sample.thermal)
    return bayesian_loss(pred.density, sample.annotations, cfg.sigma, cfg.empty_penalty), pred


def mean_loss(model: DualModNet, samples: Sequence[Sample], cfg: RunConfig) -> float:
    with nx.no_grad():
        return float(np.mean([sample_loss(model, s, cfg)[0].item() for s in samples]))


def build_datasets(cfg: RunConfig) -> tuple[list[Sample], list[Sample]]:
    """(train, val).  An empty validation source falls back to the training set."""
    if cfg.dataset == "disk":
        train = load_dataset(cfg.data_root, "train")
        val_dir = Path(cfg.data_root) / "val"
        val = load_dataset(cfg.data_root, "val") if val_dir.is_dir() else []
    else:
        bright = (cfg.syn_brightness_min, cfg.syn_brightness_max)
        if cfg.syn_people:
            rng = np.random.default_rng(cfg.syn_seed)
            train = []
            for i, n in enumerate(cfg.syn_people):
                spec = SceneSpec(
                    cfg.syn_size, cfg.syn_size, n, int(rng.integers(0, 2**31 - 1)),
                    float(rng.uniform(*bright)), cfg.syn_blob_radius,
                )
                train.append(generate_scene(spec, f"train{i:04d}"))
        else:
            train = synthetic_set(
                cfg.syn_train, cfg.syn_seed, cfg.syn_size,
                (cfg.syn_people_min, cfg.syn_people_max), bright, cfg.syn_blob_radius, "train",
            )
        val = []
        if cfg.syn_val:
            val = synthetic_set(
                cfg.syn_val, cfg.syn_seed + 1_000_003, cfg.syn_size,
                (cfg.syn_people_min, cfg.syn_people_max), bright, cfg.syn_blob_radius, "val",
            )
    if not train:
        raise ConfigError("training set is empty")
    return train, (val or train)


@dataclass
class TrainResult:
    model: DualModNet
    log_lines: list = field(default_factory=list)
    best_game0: float = float("inf")
    best_epoch: int = 0
    steps: int = 0


def _log_row(epoch: int, loss: float, report: MetricReport) -> str:
    ws = [r.fusion_w for r in report.images if r.fusion_w is not None]
    w = repr(float(np.mean(ws))) if ws else ""
    return f"{epoch},{loss!r},{report.game[0]!r},{w}"


def train(
    cfg: RunConfig,
    train_set: Optional[list] = None,
    val_set: Optional[list] = None,
    out_dir=None,
    log: Callable[[str], None] = lambda line: None,
) -> TrainResult:
    """Train with batch size 1; keep the checkpoint with the best validation GAME(0).

    Row ``epoch 0`` of the log describes the untrained model.  When
    ``out_dir`` is given, ``config.txt``, ``train_log.csv`` and
    ``checkpoint/`` are written there.
    """
    if train_set is None:
        train_set, val_set = build_datasets(cfg)
    val_set = val_set or train_set
    model = DualModNet(cfg.model_config(), seed=cfg.seed)
    opt = Adam(model.parameters(), cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 1])
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        config_io.save(cfg, out / "config.txt")

    result = TrainResult(model)
    lines = [LOG_HEADER]
    log(LOG_HEADER)

    def checkpoint(epoch: int, report: MetricReport, loss: float):
        row = _log_row(epoch, loss, report)
        lines.append(row)
        log(row)
        if report.game[0] < result.best_game0:
            result.best_game0 = report.game[0]
            result.best_epoch = epoch
            if out is not None:
                save_checkpoint(model, out / "checkpoint", {"epoch": epoch, "game0_val": report.game[0]})

    checkpoint(0, evaluate(model, val_set), mean_loss(model, train_set, cfg))

    for epoch in range(1, cfg.epochs + 1):
        if cfg.max_steps and result.steps >= cfg.max_steps:
            break
        losses = []
        for i in rng.permutation(len(train_set)):
            if cfg.max_steps and result.steps >= cfg.max_steps:
                break
            s = train_set[int(i)]
            if cfg.crop or cfg.flip_prob:
                s = augment(s, cfg.crop, cfg.flip_prob, rng)
            loss, _ = sample_loss(model, s, cfg)
            nx.backward(loss)
            opt.step()
            opt.zero_grad()
            losses.append(loss.item())
            result.steps += 1
        checkpoint(epoch, evaluate(model, val_set), float(np.mean(losses)))

    result.log_lines = lines
    if out is not None:
        (out / "train_log.csv").write_text("\n".join(lines) + "\n")
    return result
