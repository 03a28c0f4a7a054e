"""``dualmod`` command line: train, eval, infer, dump-decay, selfcheck.

Configuration comes from an optional ``--config`` file, then ``key=value``
overrides, then the dedicated flags (``--seed``, ``--out``).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import config as config_io
from . import numerics as nx
from .config import RunConfig
from .data import load_dataset, read_pnm, write_pnm
from .errors import ConfigError, DualModError
from .loss_metrics import report_summary, report_to_csv
from .model import load_checkpoint
from .sma import dump_decay_curves, write_decay_csv
from .train import build_datasets, evaluate, train


def _overrides(pairs: list[str]) -> dict:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


def resolve_config(args) -> RunConfig:
    base = config_io.load(args.config) if getattr(args, "config", None) else RunConfig()
    pairs = _overrides(getattr(args, "overrides", []) or [])
    if getattr(args, "seed", None) is not None:
        pairs["seed"] = str(args.seed)
    if getattr(args, "out", None) and args.command == "train":
        pairs["output_dir"] = args.out
    return config_io.parse_overrides(pairs, base)


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    res = train(cfg, out_dir=cfg.output_dir, log=print)
    print(f"best game0_val {res.best_game0!r} at epoch {res.best_epoch}; checkpoint in {Path(cfg.output_dir) / 'checkpoint'}")
    return 0


def cmd_eval(args) -> int:
    model_cfg = resolve_config(args).model_config() if args.config else None
    model = load_checkpoint(args.checkpoint, model_cfg)
    if args.data:
        samples = load_dataset(args.data, args.split)
    else:
        cfg = resolve_config(args)
        train_set, val_set = build_datasets(cfg)
        samples = train_set if args.split == "train" else (val_set if cfg.syn_val else [])
    if not samples:
        raise ConfigError("dataset is empty; metrics are undefined")
    report = evaluate(model, samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report_to_csv(report))
    summary = report_summary(report)
    (out / "summary.txt").write_text(summary)
    sys.stdout.write(summary)
    return 0


def cmd_infer(args) -> int:
    model = load_checkpoint(args.checkpoint)
    rgb = read_pnm(args.rgb)
    if rgb.shape[0] == 1:
        rgb = np.repeat(rgb, 3, axis=0)
    thermal = read_pnm(args.thermal)
    if thermal.shape[0] == 3:
        thermal = thermal.mean(axis=0, keepdims=True)
    with nx.no_grad():
        pred = model(rgb, thermal)
    grid = pred.density.grid
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "density.csv", "w") as fh:
        for row in grid:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    peak = float(grid.max())
    scale = peak / 255.0
    write_pnm(out / "density.pgm", grid / peak if peak > 0 else np.zeros_like(grid))
    (out / "density.scale.txt").write_text(
        f"# density = pixel * scale\nscale = {scale!r}\n"
    )
    count = float(grid.sum())
    print(f"count = {count!r}")
    if pred.fusion_w is not None:
        print(f"fusion_w = {pred.fusion_w!r}")
    return 0


def cmd_dump_decay(args) -> int:
    model = load_checkpoint(args.checkpoint)
    if not model.cfg.sma_enabled:
        raise ConfigError(f"{args.checkpoint}: checkpoint has no decay parameters (SMA disabled)")
    layers = model.decay_params()[args.encoder]
    if not 0 <= args.layer < len(layers):
        raise ConfigError(f"layer {args.layer} out of range (encoder has {len(layers)})")
    rows = dump_decay_curves(layers[args.layer], args.max_dist, args.step)
    write_decay_csv(rows, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_selfcheck(args) -> int:
    from .selfcheck import run

    report = run(log=print)
    first = report.first_failure
    if first is None:
        print("selfcheck: all checks passed")
        return 0
    print(f"selfcheck: FAILED first at {first.name}")
    return 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualmod", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("overrides", nargs="*", metavar="key=value")

    t = sub.add_parser("train", help="train and write log + best checkpoint")
    common(t)
    t.add_argument("--out", help="output directory (overrides output_dir)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="GAME/MAE/RMSE report for a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="dataset root on disk (default: synthetic set from config)")
    e.add_argument("--split", default="test", help="train/val/test (synthetic: train or val)")
    e.add_argument("--out", required=True, help="directory for report.csv and summary.txt")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="density map for one RGB/thermal pair")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--rgb", required=True)
    i.add_argument("--thermal", required=True)
    i.add_argument("--out", required=True, help="output directory")
    i.set_defaults(func=cmd_infer)

    d = sub.add_parser("dump-decay", help="CSV of learned decay curves")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--out", required=True, help="CSV path")
    d.add_argument("--encoder", choices=["rgb", "thermal"], default="rgb")
    d.add_argument("--layer", type=int, default=0)
    d.add_argument("--max-dist", type=float, default=8.0)
    d.add_argument("--step", type=float, default=0.25)
    d.set_defaults(func=cmd_dump_decay)

    s = sub.add_parser("selfcheck", help="gradient, mask and metric self-tests")
    s.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DualModError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
