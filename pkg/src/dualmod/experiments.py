"""Ablation grid over {SMA, AFM} on mixed-brightness synthetic scenes.

Each arm trains on the same 20 scenes (brightness drawn from U[0, 1]) for a
fixed number of steps and is scored by GAME(0) on a separate 20-scene
benchmark drawn the same way.  The fusion probe renders identical layouts at
brightness 0 and 1 and records the gate value on each.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .config import RunConfig
from .data import SceneSpec, generate_scene, synthetic_set
from .train import evaluate, predict, train

ARMS = {
    "baseline": dict(sma_enabled=False, afm_enabled=False),
    "sma_only": dict(sma_enabled=True, afm_enabled=False),
    "full": dict(sma_enabled=True, afm_enabled=True),
}


@dataclass
class AblationResult:
    game0: dict = field(default_factory=dict)  # arm -> list over seeds
    fusion_dark: list = field(default_factory=list)
    fusion_bright: list = field(default_factory=list)

    def mean_game0(self, arm: str) -> float:
        return float(np.mean(self.game0[arm]))


def benchmark_sets(data_seed: int = 7, n: int = 20, size: int = 64):
    train_set = synthetic_set(n, data_seed, size, (3, 12), (0.0, 1.0), prefix="train")
    bench = synthetic_set(n, data_seed + 1, size, (3, 12), (0.0, 1.0), prefix="bench")
    return train_set, bench


def fusion_probe(n: int = 10, seed: int = 11, size: int = 64):
    """Same layouts rendered at brightness 0 (dark) and 1 (bright)."""
    rng = np.random.default_rng(seed)
    dark, bright = [], []
    for i in range(n):
        s = int(rng.integers(0, 2**31 - 1))
        k = int(rng.integers(3, 13))
        dark.append(generate_scene(SceneSpec(size, size, k, s, 0.0), f"dark{i:03d}"))
        bright.append(generate_scene(SceneSpec(size, size, k, s, 1.0), f"bright{i:03d}"))
    return dark, bright


def run_ablation(
    seeds=(0, 1, 2, 3, 4),
    steps: int = 600,
    base: RunConfig | None = None,
    data_seed: int = 7,
    log=lambda msg: None,
) -> AblationResult:
    base = base or RunConfig()
    train_set, bench = benchmark_sets(data_seed)
    dark, bright = fusion_probe()
    out = AblationResult({arm: [] for arm in ARMS})
    for arm, flags in ARMS.items():
        for seed in seeds:
            cfg = replace(base, seed=seed, epochs=10**6, max_steps=steps, **flags)
            model = train(cfg, train_set, bench).model
            g0 = evaluate(model, bench).game[0]
            out.game0[arm].append(g0)
            msg = f"{arm} seed={seed} game0={g0:.4f}"
            if flags["afm_enabled"]:
                wd = float(np.mean([predict(model, s).fusion_w for s in dark]))
                wb = float(np.mean([predict(model, s).fusion_w for s in bright]))
                out.fusion_dark.append(wd)
                out.fusion_bright.append(wb)
                msg += f" w_dark={wd:.4f} w_bright={wb:.4f}"
            log(msg)
    return out
