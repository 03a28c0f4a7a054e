"""Release gate: gradient checks, mask properties and metric oracles.

Every check is a named function returning ``(ok, detail)``.  Operator
gradient checks run first so that a broken primitive is reported under its
own name rather than through some composite that happens to use it.
"""

from __future__ import annotations

import math
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .afm import FeaturePair, FusionGate, fuse
from .loss_metrics import (
    DensityMap,
    PointAnnotations,
    bayesian_loss,
    cell_centers,
    game_image,
    posterior_weights,
    rmse,
)
from .model import DualModNet, ModelConfig
from .numerics import Parameter, finite_diff_check
from .sma import AttentionConfig, DecayParams, EncoderLayer, decay_mask, decay_masks
from .spatial import TokenGrid, pairwise_distance

# name -> (input shapes, function); inputs are random, kept away from 0
OP_CASES: dict[str, tuple[list, Callable]] = {
    "add": ([(3, 4), (3, 4)], nx.add),
    "add_bias": ([(3, 4), (4,)], nx.add),
    "sub": ([(3, 4), (3, 4)], nx.sub),
    "mul": ([(3, 4), (3, 4)], nx.mul),
    "mul_scalar": ([(3, 4), ()], nx.mul),
    "scale": ([(3, 2)], lambda a: nx.scale(a, -1.7)),
    "add_scalar": ([(3, 2)], lambda a: nx.add_scalar(a, 0.3)),
    "exp": ([(4,)], nx.exp),
    "log": ([(4,)], lambda a: nx.log(nx.add_scalar(nx.absolute(a), 0.5))),
    "absolute": ([(6,)], nx.absolute),
    "relu": ([(6,)], nx.relu),
    "leaky_relu": ([(6,)], lambda a: nx.leaky_relu(a, 0.01)),
    "sigmoid": ([(6,)], nx.sigmoid),
    "softplus": ([(6,)], nx.softplus),
    "sum_all": ([(2, 3)], nx.sum_all),
    "mean_all": ([(2, 3)], nx.mean_all),
    "reshape": ([(2, 6)], lambda a: nx.reshape(a, (3, 4))),
    "transpose": ([(3, 4)], nx.transpose),
    "take": ([(5,)], lambda a: nx.take(a, 2)),
    "columns": ([(3, 6)], lambda a: nx.columns(a, 1, 4)),
    "concat_columns": ([(3, 2), (3, 3)], lambda a, b: nx.concat_columns([a, b])),
    "matmul": ([(3, 4), (4, 2)], nx.matmul),
    "einsum": ([(4, 2, 3), (5, 2, 3)], lambda a, b: nx.einsum("nhd,mhd->hnm", a, b)),
    "softmax_rows": ([(2, 3, 5)], lambda a: nx.softmax_rows(nx.scale(a, 3.0))),
    "layer_norm": ([(4, 5), (5,), (5,)], nx.layer_norm),
    "conv2d_3x3": ([(2, 5, 4), (3, 2, 3, 3), (3,)], lambda x, k, b: nx.conv2d(x, k, b, 1)),
    "conv2d_1x1": ([(2, 3, 3), (4, 2, 1, 1), (4,)], lambda x, k, b: nx.conv2d(x, k, b, 0)),
    "max_pool2d": ([(2, 5, 4)], nx.max_pool2d),
    "global_avg_pool": ([(3, 4, 2)], nx.global_avg_pool),
}


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str = ""
    seconds: float = 0.0


def _format(r: CheckResult) -> str:
    tail = f": {r.detail}" if r.detail else ""
    return f"{'PASS' if r.ok else 'FAIL'} {r.name} ({r.seconds:.2f}s){tail}"


@dataclass
class SelfCheckReport:
    results: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.ok for r in self.results)

    @property
    def first_failure(self):
        return next((r for r in self.results if not r.ok), None)

    def lines(self) -> list[str]:
        out = [_format(r) for r in self.results]
        first = self.first_failure
        out.append("selfcheck: all checks passed" if first is None else f"selfcheck: FAILED first at {first.name}")
        return out


def _away_from_zero(rng, shape):
    x = rng.uniform(0.2, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return x


def _probe_check(fn, params, rng, **kw):
    with nx.no_grad():
        shape = fn().shape
    probe = nx.constant(rng.normal(size=shape))
    return finite_diff_check(lambda: nx.sum_all(nx.mul(fn(), probe)), params, **kw)


def op_gradient(name: str):
    shapes, fn = OP_CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    params = [Parameter(_away_from_zero(rng, s), f"in{i}") for i, s in enumerate(shapes)]
    rep = _probe_check(lambda: fn(*params), params, rng)
    return rep.passed, f"max rel err {rep.max_rel_error:.2e}" + ("" if rep.passed else f"; {rep}")


def _jitter(decay: DecayParams, rng):
    # random thresholds stay clear of the integer / sqrt lattice distances
    decay.beta_bias.data[:] = rng.uniform(-1.0, 2.0, size=decay.beta_bias.shape)


def decay_mask_gradient():
    rng = np.random.default_rng(1)
    S = Parameter(pairwise_distance(TokenGrid(2, 3)).data.copy(), "S")
    s = Parameter(rng.uniform(0.1, 0.9, size=3), "scale")
    b = Parameter(rng.uniform(0.2, 2.7, size=3) + 0.013, "bias")
    ok, worst = True, 0.0
    for log in (False, True):
        rep = _probe_check(lambda: decay_masks(S, s, b, 0.01, log), [S, s, b], rng)
        ok, worst = ok and rep.passed, max(worst, rep.max_rel_error)
    return ok, f"max rel err {worst:.2e}"


def encoder_beta_gradient():
    rng = np.random.default_rng(2)
    layer = EncoderLayer(AttentionConfig(model_dim=8, num_heads=8), rng)
    layer.name_parameters()
    _jitter(layer.decay, rng)
    S = pairwise_distance(TokenGrid(3, 3))
    x = nx.constant(rng.normal(size=(9, 8)))
    rep = _probe_check(lambda: layer(x, S), [layer.decay.beta_scale, layer.decay.beta_bias], rng)
    return rep.passed, f"max rel err {rep.max_rel_error:.2e}" + ("" if rep.passed else f"; {rep}")


def afm_gradient():
    rng = np.random.default_rng(3)
    gate = FusionGate(8, rng)
    gate.name_parameters()
    pair = FeaturePair(nx.constant(rng.normal(size=(8, 3, 3))), nx.constant(rng.normal(size=(8, 3, 3))))
    rep = _probe_check(lambda: fuse(pair, gate(pair)), gate.parameters(), rng)
    return rep.passed, f"max rel err {rep.max_rel_error:.2e}" + ("" if rep.passed else f"; {rep}")


DESK_GRADCHECK_MODEL = ModelConfig(
    backbone_channels=(4, 8), downsample_factor=4, model_dim=8, num_heads=8, num_layers=2, head_channels=(8, 4)
)


def model_gradient(cfg: ModelConfig = DESK_GRADCHECK_MODEL, seed: int = 8):
    rng = np.random.default_rng(seed)
    model = DualModNet(cfg, seed=seed)
    for layers in model.decay_params().values():
        for d in layers:
            _jitter(d, rng)
    rgb, th = rng.random((3, 16, 16)), rng.random((1, 16, 16))
    ann = PointAnnotations(rng.uniform(0, 16, size=(3, 2)))
    rep = finite_diff_check(lambda: bayesian_loss(model(rgb, th).density, ann, 4.0), model.parameters())
    detail = f"{rep.n_checked} params, max rel err {rep.max_rel_error:.2e}"
    return rep.passed, detail + ("" if rep.passed else f"; {rep}")


def mask_formula():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        bs, bb = rng.normal(0, 3), rng.normal(0, 2)
        d = rng.uniform(0, 10)
        dp = DecayParams(1)
        dp.beta_scale.data[:] = bs
        dp.beta_bias.data[:] = bb
        s, b = dp.effective_values()
        if not 0.0 < s[0] < 1.0:
            continue
        got = decay_mask(nx.constant(np.array([[d]])), s[0], b[0]).data[0, 0]
        u = d - b[0]
        expect = s[0] ** (u if u > 0 else 0.01 * u)
        worst = max(worst, abs(got - expect))
    return worst <= 1e-12, f"max abs err {worst:.1e}"


def mask_threshold_and_monotone():
    rng = np.random.default_rng(5)
    for _ in range(200):
        s, b = rng.uniform(0.01, 0.99), rng.uniform(0.0, 5.0)
        at = decay_mask(nx.constant(np.array([[b]])), s, b).data[0, 0]
        if at != 1.0:
            return False, f"M({b}) = {at!r} != 1"
        d = np.sort(rng.uniform(b, b + 10, size=50))[None]
        m = decay_mask(nx.constant(d), s, b).data[0]
        if np.any(np.diff(m) > 0):
            return False, f"mask increases beyond threshold for s={s}, b={b}"
    return True, ""


def vanilla_limit():
    rng = np.random.default_rng(6)
    cfg = AttentionConfig(model_dim=8, num_heads=8)
    layer = EncoderLayer(cfg, rng)
    layer.decay.beta_scale.data[:] = 20.0
    S = pairwise_distance(TokenGrid(3, 3))
    x = nx.constant(rng.normal(size=(9, 8)))
    with nx.no_grad():
        diff = float(np.abs(layer(x, S).data - layer(x, None).data).max())
    return diff < 1e-5, f"max diff {diff:.1e}"


def _game_bruteforce(density, f, points, height, width, level):
    k = 2 ** level
    total = 0.0
    for ry in range(k):
        for rx in range(k):
            xl, xh = rx * width / k, (rx + 1) * width / k
            yl, yh = ry * height / k, (ry + 1) * height / k
            pred = sum(
                density[i, j]
                for i in range(density.shape[0])
                for j in range(density.shape[1])
                if xl <= (j + 0.5) * f < xh and yl <= (i + 0.5) * f < yh
            )
            gt = sum(1 for x, y in points if xl <= x < xh and yl <= y < yh)
            total += abs(pred - gt)
    return total


def game_oracle(n: int = 200, seed: int = 7):
    rng = np.random.default_rng(seed)
    for t in range(n):
        f = int(rng.choice([4, 8]))
        h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        density = rng.exponential(0.3, size=(h, w))
        k = int(rng.integers(0, 12))
        pts = np.stack([rng.uniform(0, w * f, k), rng.uniform(0, h * f, k)], axis=1)
        vals = [game_image(density, f, pts, h * f, w * f, L) for L in range(4)]
        for L in range(4):
            ref = _game_bruteforce(density, f, pts, h * f, w * f, L)
            if abs(vals[L] - ref) > 1e-9:
                return False, f"instance {t} level {L}: {vals[L]!r} vs oracle {ref!r}"
        if abs(vals[0] - abs(density.sum() - k)) > 1e-9:
            return False, f"instance {t}: GAME(0) != |count error|"
        if any(vals[L + 1] < vals[L] - 1e-12 for L in range(3)):
            return False, f"instance {t}: GAME not monotone in L"
    d = np.array([[2.0, 0.0], [1.0, 1.0]])
    pts = np.array([[4.0, 4.0], [12.0, 4.0], [4.0, 12.0], [12.0, 12.0]])
    if game_image(d, 8, pts, 16, 16, 1) != 2.0 or game_image(d, 8, pts, 16, 16, 0) != 0.0:
        return False, "quadrant hand example"
    return True, f"{n} instances"


def count_metrics():
    cases = [(([5.0], [2.0]), 3.0), (([1.0, 2.0], [1.0, 2.0]), 0.0), (([3.0, 0.0], [0.0, 4.0]), math.sqrt(12.5))]
    for (p, g), want in cases:
        got = rmse(p, g)
        if abs(got - want) > 1e-12:
            return False, f"rmse({p}, {g}) = {got!r}, expected {want!r}"
    return True, ""


def loss_contracts():
    rng = np.random.default_rng(8)
    P = posterior_weights(cell_centers(8, 8, 8), rng.uniform(0, 64, size=(13, 2)), 8.0)
    err = float(np.abs(P.sum(axis=0) - 1.0).max())
    if err > 1e-9:
        return False, f"posterior sums off by {err:.1e}"
    d = rng.random((4, 4))
    one = bayesian_loss(DensityMap(nx.constant(d[None]), 8), PointAnnotations([[10.0, 20.0]]), 8.0).item()
    if abs(one - abs(1 - d.sum())) > 1e-12:
        return False, f"single-annotation loss {one!r}"
    far = np.zeros((1, 4, 4))
    far[0, 0, 0] = far[0, 3, 3] = 1.0
    loss = bayesian_loss(DensityMap(nx.constant(far), 8), PointAnnotations([[4.0, 4.0], [28.0, 28.0]]), 2.0).item()
    if not loss < 1e-6:
        return False, f"far-separated pair loss {loss!r}"
    p = Parameter(rng.random((1, 6, 6)) * 0.1, "density")
    ann = PointAnnotations(rng.uniform(0, 48, size=(5, 2)))
    rep = finite_diff_check(lambda: bayesian_loss(DensityMap(p, 8), ann, 8.0), [p], rel_tol=1e-6)
    if not rep.passed:
        return False, f"loss gradient: {rep}"
    return True, ""


def checks() -> list[tuple[str, Callable]]:
    out = [(f"grad:{name}", (lambda n=name: op_gradient(n))) for name in OP_CASES]
    out += [
        ("grad:decay_masks", decay_mask_gradient),
        ("grad:encoder_decay_params", encoder_beta_gradient),
        ("grad:afm_gate", afm_gradient),
        ("grad:desk_model", model_gradient),
        ("mask:formula", mask_formula),
        ("mask:threshold_and_monotone", mask_threshold_and_monotone),
        ("mask:vanilla_limit", vanilla_limit),
        ("metric:game_oracle", game_oracle),
        ("metric:rmse", count_metrics),
        ("loss:contracts", loss_contracts),
    ]
    return out


def run(log: Callable[[str], None] = lambda line: None) -> SelfCheckReport:
    report = SelfCheckReport()
    for name, fn in checks():
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failure of that check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        res = CheckResult(name, bool(ok), detail, time.perf_counter() - t0)
        report.results.append(res)
        log(_format(res))
    return report
