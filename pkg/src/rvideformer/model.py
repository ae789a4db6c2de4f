"""RViDeformer assembly, presets, losses, metrics and MAC accounting."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .numerics import check_finite
from .raw import neighbor_subsample_indices, subsample, toy_isp_tensor
from .reparam import fuse_module
from .spatial import MSSB, AttentionConfig
from .temporal import MTSB

PSNR_IDENTICAL = math.inf


@dataclass(frozen=True)
class ModelConfig:
    d_t: int
    d: int
    m_tr: int
    m_sr: int
    n_t: int
    n_s: int
    heads: int
    window: Tuple[int, int] = (8, 8)
    neighbor_factor: int = 3
    mlp_ratio: float = 2.0
    dropout: float = 0.0
    spatial_branches: bool = True
    temporal_branches: bool = True
    scale_schedule: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        for name in ("d_t", "d", "m_tr", "n_t", "n_s", "heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.m_sr < 0:
            raise ValueError("m_sr must be nonnegative")
        validate_schedule(self.schedule)

    @property
    def schedule(self) -> Tuple[int, ...]:
        if self.scale_schedule is not None:
            return tuple(self.scale_schedule)
        return default_schedule(self.m_tr)

    @property
    def levels(self) -> int:
        return max(self.schedule) + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["window"] = list(self.window)
        d["scale_schedule"] = None if self.scale_schedule is None else list(self.scale_schedule)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["window"] = tuple(d["window"])
        if d.get("scale_schedule") is not None:
            d["scale_schedule"] = tuple(d["scale_schedule"])
        return cls(**d)


def default_schedule(m_tr: int) -> Tuple[int, ...]:
    if m_tr == 14:
        return (0, 0, 0, 1, 1, 1, 2, 2, 1, 1, 1, 0, 0, 0)
    if m_tr == 4:
        return (0, 1, 1, 0)
    if m_tr == 1:
        return (0,)
    raise ValueError(f"no default scale schedule for M_TR={m_tr}; pass scale_schedule")


def validate_schedule(schedule: Sequence[int]) -> None:
    if not schedule or schedule[0] != 0 or schedule[-1] != 0:
        raise ValueError(f"scale schedule must start and end at full resolution: {schedule}")
    if any(s < 0 for s in schedule):
        raise ValueError("scale levels must be nonnegative")
    if any(abs(a - b) > 1 for a, b in zip(schedule, schedule[1:])):
        raise ValueError(f"scale schedule may move one level at a time: {schedule}")


PRESETS: Dict[str, ModelConfig] = {
    "T": ModelConfig(d_t=24, d=24, m_tr=14, m_sr=2, n_t=1, n_s=1, heads=6),
    "S": ModelConfig(d_t=24, d=30, m_tr=14, m_sr=3, n_t=2, n_s=1, heads=6),
    "M": ModelConfig(d_t=24, d=30, m_tr=14, m_sr=4, n_t=4, n_s=2, heads=6),
    "L": ModelConfig(d_t=84, d=108, m_tr=14, m_sr=4, n_t=4, n_s=2, heads=6),
    "micro": ModelConfig(d_t=12, d=12, m_tr=4, m_sr=2, n_t=1, n_s=1, heads=2),
}


def preset(name: str, **overrides) -> ModelConfig:
    key = "micro" if name in ("micro", "µ", "mu") else name
    if key not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[key], **overrides)


def attention_configs(cfg: ModelConfig, level: int) -> Tuple[AttentionConfig, AttentionConfig]:
    """(temporal, spatial) attention settings at a scale level; widths double per level."""
    mult = 2 ** level
    common = dict(window=cfg.window, heads=cfg.heads, neighbor_factor=cfg.neighbor_factor,
                  use_global=level > 0)
    return (AttentionConfig(dim=cfg.d_t * mult, **common), AttentionConfig(dim=cfg.d * mult, **common))


class Down(nn.Module):
    """2x2 average pool then 1x1 channel expansion x2."""

    def __init__(self, c: int):
        super().__init__()
        self.proj = nn.Linear(c, 2 * c)

    def forward(self, x):
        b, h, w, c = x.shape
        x = x.reshape(b, h // 2, 2, w // 2, 2, c).mean(dim=(2, 4))
        return self.proj(x)

    def count_macs(self, frames, h, w):
        return frames * (h // 2) * (w // 2) * self.proj.in_features * self.proj.out_features


class Up(nn.Module):
    """Nearest x2 then 1x1 channel reduction, concatenated with the skip and merged by 1x1."""

    def __init__(self, c: int):
        super().__init__()
        self.proj = nn.Linear(2 * c, c)
        self.merge = nn.Linear(2 * c, c)

    def forward(self, x, skip):
        x = self.proj(x)
        x = x.repeat_interleave(2, dim=1).repeat_interleave(2, dim=2)
        return self.merge(torch.cat([x, skip], dim=-1))

    def count_macs(self, frames, h, w):
        """``h×w`` is the upsampled (output) extent."""
        low = frames * (h // 2) * (w // 2) * self.proj.in_features * self.proj.out_features
        return low + frames * h * w * self.merge.in_features * self.merge.out_features


class RViDeformer(nn.Module):
    """Packed noisy clip ``B×T×4×H×W`` (normalized) -> denoised clip, same shape.

    Shallow 3x3 head, ``M_TR`` blocks alternating MTSB/MSSB over a U-shaped
    scale schedule, ``M_SR`` MSSB refinement blocks at full resolution, and a
    3x3 output head whose result is added to the input.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.fused = False
        c = cfg.d
        self.head = nn.Conv2d(4, c, 3, padding=1)
        self.recon = nn.ModuleList()
        self.transitions = nn.ModuleDict()
        sched = cfg.schedule
        for i, level in enumerate(sched):
            if i > 0 and level != sched[i - 1]:
                prev = sched[i - 1]
                width = c * 2 ** min(level, prev)
                self.transitions[str(i)] = Down(width) if level > prev else Up(width)
            width = c * 2 ** level
            t_cfg, s_cfg = attention_configs(cfg, level)
            if i % 2 == 0:
                block = MTSB(width, t_cfg, s_cfg, cfg.n_t, cfg.mlp_ratio, cfg.dropout,
                             cfg.temporal_branches, cfg.spatial_branches)
            else:
                block = MSSB(width, s_cfg, cfg.n_s, cfg.mlp_ratio, cfg.dropout, cfg.spatial_branches)
            self.recon.append(block)
        _, s_cfg0 = attention_configs(cfg, 0)
        self.refine = nn.ModuleList(
            MSSB(c, s_cfg0, cfg.n_s, cfg.mlp_ratio, cfg.dropout, cfg.spatial_branches) for _ in range(cfg.m_sr)
        )
        self.tail = nn.Conv2d(c, 4, 3, padding=1)

    @property
    def multiple(self) -> int:
        return max(self.cfg.window) * 2 ** (self.cfg.levels - 1)

    def block_kinds(self) -> List[str]:
        return [type(b).__name__ for b in self.recon]

    def _run_block(self, block, x, b, t):
        if isinstance(block, MTSB):
            return block(x)
        _, _, h, w, c = x.shape
        return block(x.reshape(b * t, h, w, c)).reshape(b, t, h, w, c)

    def forward(self, clip: torch.Tensor) -> torch.Tensor:
        if clip.dim() == 4:
            return self.forward(clip.unsqueeze(0)).squeeze(0)
        check_finite(clip, "input clip")
        b, t, ch, h, w = clip.shape
        m = self.multiple
        ph, pw = (-h) % m, (-w) % m
        x = clip.reshape(b * t, ch, h, w)
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        hp, wp = x.shape[-2:]
        feat = self.head(x).permute(0, 2, 3, 1).reshape(b, t, hp, wp, -1)
        skips = []
        for i, block in enumerate(self.recon):
            key = str(i)
            if key in self.transitions:
                tr = self.transitions[key]
                flat = feat.reshape(b * t, *feat.shape[2:])
                if isinstance(tr, Down):
                    skips.append(flat)
                    flat = tr(flat)
                else:
                    flat = tr(flat, skips.pop())
                feat = flat.reshape(b, t, *flat.shape[1:])
            feat = self._run_block(block, feat, b, t)
        for block in self.refine:
            feat = self._run_block(block, feat, b, t)
        feat = feat.reshape(b * t, hp, wp, -1).permute(0, 3, 1, 2)
        out = x + self.tail(feat)
        out = out[..., :h, :w]
        return out.reshape(b, t, ch, h, w)

    def count_macs(self, input_shape: Sequence[int]) -> int:
        """Analytic multiply-accumulate count for a ``T×4×H×W`` input."""
        t, ch, h, w = input_shape
        m = self.multiple
        h += (-h) % m
        w += (-w) % m
        frames = t + (t % 2)
        c = self.cfg.d
        macs = t * (c * ch * 9 * h * w + ch * c * 9 * h * w)
        for i, (block, level) in enumerate(zip(self.recon, self.cfg.schedule)):
            key = str(i)
            lh, lw = h // 2 ** level, w // 2 ** level
            if key in self.transitions:
                tr = self.transitions[key]
                if isinstance(tr, Down):
                    macs += tr.count_macs(t, 2 * lh, 2 * lw)
                else:
                    macs += tr.count_macs(t, lh, lw)
            macs += block.count_macs(frames if isinstance(block, MTSB) else t, lh, lw)
        for block in self.refine:
            macs += block.count_macs(t, h, w)
        return macs


def build_model(cfg: ModelConfig, seed: int = 0) -> RViDeformer:
    torch.manual_seed(seed)
    return RViDeformer(cfg)


def fuse_model(model: RViDeformer, allow_fused: bool = False) -> RViDeformer:
    return fuse_module(model, allow_fused=allow_fused)


def count_macs(model: RViDeformer, input_shape: Sequence[int]) -> int:
    return model.count_macs(input_shape)


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# --- losses ------------------------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    beta1: float = 0.5
    beta2_max: float = 2.0

    def beta2(self, epoch: int, total_epochs: int) -> float:
        if total_epochs <= 0:
            return 0.0
        return self.beta2_max * (epoch / total_epochs)


def supervised_loss(out: torch.Tensor, gt: torch.Tensor, weights: LossWeights = LossWeights(),
                    isp: Callable[[torch.Tensor], torch.Tensor] = toy_isp_tensor) -> torch.Tensor:
    """Raw L1 plus weighted sRGB L1 through a fixed ISP (mean absolute errors)."""
    if out.shape != gt.shape:
        raise ValueError(f"output {tuple(out.shape)} and target {tuple(gt.shape)} differ")
    raw = (out - gt).abs().mean()
    if weights.beta1 == 0:
        return raw
    with torch.no_grad():
        s_gt = isp(gt)
    return raw + weights.beta1 * (isp(out) - s_gt).abs().mean()


@dataclass
class UnsupervisedTerms:
    loss: torch.Tensor
    rec: torch.Tensor
    reg: torch.Tensor
    beta2: float


def unsupervised_loss(model: Callable[[torch.Tensor], torch.Tensor], noisy: torch.Tensor, seed: int,
                      epoch: int, total_epochs: int,
                      weights: LossWeights = LossWeights()) -> UnsupervisedTerms:
    """Neighbor2Neighbor loss on a packed noisy clip ``...×4×H×W``.

    The full-frame prediction only regularizes and carries no gradient.
    """
    h, w = noisy.shape[-2:]
    i1, i2 = neighbor_subsample_indices(h, w, seed)
    s1, s2 = subsample(noisy, i1), subsample(noisy, i2)
    pred = model(s1)
    with torch.no_grad():
        full = model(noisy)
        g1, g2 = subsample(full, i1), subsample(full, i2)
    diff = pred - s2
    rec = (diff ** 2).mean()
    reg = ((diff - (g1 - g2)) ** 2).mean()
    beta2 = weights.beta2(epoch, total_epochs)
    return UnsupervisedTerms(rec + beta2 * reg, rec, reg, beta2)


# --- metrics -----------------------------------------------------------------


def psnr(a, b, peak: float = 1.0) -> float:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError("psnr inputs differ in shape")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(peak ** 2 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean SSIM of ``C×H×W`` (or ``H×W``) images; 11x11 Gaussian, sigma 1.5,
    valid-region statistics, averaged over channels."""
    x = torch.as_tensor(np.asarray(a, np.float64))
    y = torch.as_tensor(np.asarray(b, np.float64))
    if x.shape != y.shape:
        raise ValueError("ssim inputs differ in shape")
    if x.dim() == 2:
        x, y = x[None], y[None]
    x = x.reshape(-1, 1, *x.shape[-2:])
    y = y.reshape(-1, 1, *y.shape[-2:])
    win = _gaussian_window()[None, None]
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_x = F.conv2d(x, win)
    mu_y = F.conv2d(y, win)
    sxx = F.conv2d(x * x, win) - mu_x ** 2
    syy = F.conv2d(y * y, win) - mu_y ** 2
    sxy = F.conv2d(x * y, win) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float((num / den).mean(dim=(1, 2, 3)).mean())
