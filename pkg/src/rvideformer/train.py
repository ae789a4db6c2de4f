"""Training loop, evaluation and checkpoint-level fusion."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .config import RunConfig
from .data import Clip, load_dataset, split_dataset
from .model import (
    LossWeights,
    ModelConfig,
    RViDeformer,
    build_model,
    fuse_model,
    preset,
    psnr,
    ssim,
    supervised_loss,
    unsupervised_loss,
)
from .raw import toy_isp_tensor
from .reparam import AlreadyFusedError
from .store import ParamStore, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

LOG_HEADER = ["step", "loss", "lr", "psnr_raw", "psnr_srgb", "ssim_raw", "ssim_srgb"]


class TrainingDiverged(RuntimeError):
    pass


def set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def model_config_for(run: RunConfig) -> ModelConfig:
    return preset(run.preset, spatial_branches=run.spatial_branches, temporal_branches=run.temporal_branches)


# --- evaluation --------------------------------------------------------------


@torch.no_grad()
def denoise(model: RViDeformer, noisy: np.ndarray) -> np.ndarray:
    model.eval()
    out = model(torch.from_numpy(np.ascontiguousarray(noisy)).float()[None])[0]
    return out.numpy()


def clip_metrics(pred: np.ndarray, clean: np.ndarray) -> Dict[str, float]:
    """PSNR over the whole clip and frame-averaged SSIM, raw and toy-sRGB."""
    pred = np.clip(pred, 0.0, 1.0)
    srgb_p = toy_isp_tensor(torch.from_numpy(pred).double()).numpy()
    srgb_c = toy_isp_tensor(torch.from_numpy(np.asarray(clean, np.float64))).numpy()
    return {
        "psnr_raw": psnr(pred, clean),
        "psnr_srgb": psnr(srgb_p, srgb_c),
        "ssim_raw": float(np.mean([ssim(p, c) for p, c in zip(pred, clean)])),
        "ssim_srgb": float(np.mean([ssim(p, c) for p, c in zip(srgb_p, srgb_c)])),
    }


@dataclass
class EvalReport:
    per_clip: List[Dict[str, float]]
    mean: Dict[str, float]
    baseline: Dict[str, float]

    def rows(self) -> List[Dict[str, object]]:
        return self.per_clip + [dict(name="mean", **self.mean), dict(name="noisy", **self.baseline)]


def _mean(rows: Sequence[Dict[str, float]]) -> Dict[str, float]:
    keys = ("psnr_raw", "psnr_srgb", "ssim_raw", "ssim_srgb")
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}


def evaluate(model: Optional[RViDeformer], clips: Sequence[Clip]) -> EvalReport:
    """Model scores per clip and on average, with the noisy input as baseline.

    ``model=None`` scores the noisy input itself.
    """
    per, base = [], []
    for clip in clips:
        pred = clip.noisy if model is None else denoise(model, clip.noisy)
        per.append(dict(name=clip.name, **clip_metrics(pred, clip.clean)))
        base.append(clip_metrics(clip.noisy, clip.clean))
    return EvalReport(per, _mean(per), _mean(base))


# --- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    model: RViDeformer
    log: List[Dict[str, float]] = field(default_factory=list)
    lrs: List[float] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)
    checkpoint: Optional[Path] = None


def _crop(clip: Clip, size: int, rng: np.random.Generator, frames: int):
    t, _, h, w = clip.noisy.shape
    ph, pw = min(size, h), min(size, w)
    y = int(rng.integers(0, h - ph + 1))
    x = int(rng.integers(0, w - pw + 1))
    t0 = int(rng.integers(0, t - min(frames, t) + 1))
    sl = (slice(t0, t0 + min(frames, t)), slice(None), slice(y, y + ph), slice(x, x + pw))
    return clip.noisy[sl], clip.clean[sl]


def manifest_for(cfg: ModelConfig, fused: bool, step: int, seed: int) -> dict:
    return {"config": cfg.to_dict(), "fused": fused, "step": step, "seed": seed}


def train(run: RunConfig, train_clips: Optional[Sequence[Clip]] = None,
          val_clips: Optional[Sequence[Clip]] = None, out_dir: Optional[Path] = None) -> TrainResult:
    """Optimize with Adam; supervised or Neighbor2Neighbor loss per ``run.mode``.

    Logs ``LOG_HEADER`` rows every ``run.log_every`` steps and at the end.
    """
    if train_clips is None:
        clips = load_dataset(run.data)
        train_clips, val_clips = split_dataset(clips)
    unsup = run.mode == "train-unsup"
    set_determinism(run.seed)
    cfg = model_config_for(run)
    model = build_model(cfg, run.seed)
    opt = torch.optim.Adam(model.parameters(), lr=run.lr, betas=(0.9, 0.999), eps=1e-8)
    weights = LossWeights(beta1=run.beta1)
    rng = np.random.default_rng(run.seed)
    result = TrainResult(model)
    window_losses: List[float] = []
    out = Path(out_dir or run.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "metrics.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_HEADER)
        for step in range(run.epochs):
            lr = run.lr_at(step)
            for group in opt.param_groups:
                group["lr"] = lr
            clip = train_clips[int(rng.integers(len(train_clips)))]
            noisy, clean = _crop(clip, run.patch // 2, rng, run.frames)
            noisy_t = torch.from_numpy(np.ascontiguousarray(noisy))[None]
            model.train()
            if unsup:
                terms = unsupervised_loss(model, noisy_t, int(rng.integers(2 ** 31)), step, run.epochs, weights)
                loss = terms.loss
            else:
                clean_t = torch.from_numpy(np.ascontiguousarray(clean))[None]
                loss = supervised_loss(model(noisy_t), clean_t, weights)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at step {step} (lr={lr}, clip={clip.name})")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            result.lrs.append(lr)
            result.losses.append(value)
            window_losses.append(value)
            last = step == run.epochs - 1
            if (step + 1) % run.log_every == 0 or last:
                row = {"step": step + 1, "loss": float(np.mean(window_losses)), "lr": lr}
                if val_clips:
                    row.update(evaluate(model, val_clips).mean)
                window_losses = []
                result.log.append(row)
                writer.writerow([_fmt(row.get(k, "")) for k in LOG_HEADER])
                log.info("step %d loss %.5f psnr %.2f", row["step"], row["loss"], row.get("psnr_raw", float("nan")))
    ckpt = out / "model.rvps"
    save_checkpoint(ckpt, ParamStore.from_module(model), manifest_for(cfg, False, run.epochs, run.seed))
    result.checkpoint = ckpt
    return result


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(round(v, 6)) if math.isfinite(v) else str(v)
    return str(v)


# --- checkpoints and fusion --------------------------------------------------


def model_from_checkpoint(path) -> RViDeformer:
    store, manifest = load_checkpoint(path)
    cfg = ModelConfig.from_dict(manifest["config"])
    model = RViDeformer(cfg)
    if manifest.get("fused"):
        model = fuse_model(model)
    store.load_into(model)
    model.eval()
    return model


def probe_clips(n: int, seed: int, t: int = 2, size: int = 32) -> List[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [rng.uniform(0.0, 1.0, size=(t, 4, size, size)).astype(np.float32) for _ in range(n)]


def fuse_checkpoint(src, dst, n_probe: int = 3, seed: int = 0) -> Dict[str, float]:
    """Write the fused form of checkpoint ``src`` to ``dst``; report the largest
    output difference over random probe clips. Refuses already-fused input."""
    store, manifest = load_checkpoint(src)
    if manifest.get("fused"):
        raise AlreadyFusedError(f"{src} is already fused")
    model = model_from_checkpoint(src)
    fused = fuse_model(model)
    cfg = ModelConfig.from_dict(manifest["config"])
    save_checkpoint(dst, ParamStore.from_module(fused),
                    manifest_for(cfg, True, manifest.get("step", 0), manifest.get("seed", 0)))
    diffs = [float(np.abs(denoise(model, c) - denoise(fused, c)).max()) for c in probe_clips(n_probe, seed)]
    return {"max_abs_diff": max(diffs), "params_before": store.num_values(),
            "params_after": ParamStore.from_module(fused).num_values()}
