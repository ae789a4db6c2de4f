"""Command-line entry point: ``rvideformer {gen,train,eval,fuse,gradcheck}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from . import gradcheck
from .config import RunConfig, load_config
from .data import gen_synthetic_dataset, load_dataset, split_dataset
from .reparam import AlreadyFusedError
from .train import evaluate, fuse_checkpoint, model_from_checkpoint, train

PRESET_CHOICES = ["T", "S", "M", "L", "micro"]


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rvideformer", description="Raw video denoising transformer toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("gen", "train", "eval", "fuse", "gradcheck"):
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="key=value run configuration file")
        s.add_argument("--preset", choices=PRESET_CHOICES)
        s.add_argument("--mode", choices=["sup", "unsup"])
        s.add_argument("--seed", type=int)
        s.add_argument("--data", type=str)
        s.add_argument("--out", type=str)
        s.add_argument("--fused", action="store_true")
        if name in ("eval", "fuse"):
            s.add_argument("--checkpoint", type=Path, help="input RVPS checkpoint (default <out>/model.rvps)")
    return p


def _run_config(args, mode: str) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    updates = {}
    if args.mode is not None:
        mode = {"sup": "train-sup", "unsup": "train-unsup"}[args.mode]
    elif mode == "train":
        mode = cfg.mode if cfg.mode.startswith("train") else "train-sup"
    updates["mode"] = mode
    for key in ("preset", "seed", "data", "out"):
        value = getattr(args, key)
        if value is not None:
            updates[key] = value
    if args.fused:
        updates["fused"] = True
    return replace(cfg, **updates)


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = _parser().parse_args(argv)
    cmd = args.command
    run = _run_config(args, {"gen": "gen", "eval": "eval", "fuse": "fuse", "gradcheck": "gradcheck"}.get(cmd, "train"))

    if cmd == "gen":
        out = gen_synthetic_dataset(run.data, run.n_clips, run.frames, run.height, run.width,
                                    seed=run.seed, level=run.noise_level or None)
        print(f"wrote {run.n_clips} clip pairs to {out}")
        return 0

    if cmd == "train":
        result = train(run, out_dir=Path(run.out))
        print(f"checkpoint: {result.checkpoint}")
        if result.log:
            print(json.dumps(result.log[-1]))
        return 0

    if cmd == "eval":
        ckpt = args.checkpoint or Path(run.out) / "model.rvps"
        model = model_from_checkpoint(ckpt)
        if run.fused and not model.fused:
            from .model import fuse_model
            model = fuse_model(model)
        _, val = split_dataset(load_dataset(run.data))
        report = evaluate(model, val)
        out = Path(run.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "eval.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, ["name", "psnr_raw", "psnr_srgb", "ssim_raw", "ssim_srgb"],
                                    lineterminator="\n")
            writer.writeheader()
            for row in report.rows():
                writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
        print(json.dumps({"model": report.mean, "noisy": report.baseline}, indent=2))
        return 0

    if cmd == "fuse":
        src = args.checkpoint or Path(run.out) / "model.rvps"
        dst = Path(run.out) / "model_fused.rvps"
        try:
            report = fuse_checkpoint(src, dst, seed=run.seed)
        except AlreadyFusedError as exc:
            print(f"refusing to fuse: {exc}", file=sys.stderr)
            return 2
        print(json.dumps(report, indent=2))
        return 0

    if cmd == "gradcheck":
        table = gradcheck.run_all(run.seed)
        lines = gradcheck.format_table(table)
        print("\n".join(lines))
        return 0 if all(v <= gradcheck.TOLERANCE for v in table.values()) else 1

    return 1


if __name__ == "__main__":
    sys.exit(main())
