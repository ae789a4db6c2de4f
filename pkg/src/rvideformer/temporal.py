"""Temporal mutual attention: a reference frame queries a supporting frame's
window (TMA), its global pool (GTMA), or its pooled neighbourhood (NTMA).

Clips are channel-last ``B×T×H×W×C``.
"""

from __future__ import annotations

from typing import List

import torch
import torch.nn as nn

from .reparam import RepConv, RepMLP
from .spatial import (
    AttentionConfig,
    Projection,
    SpatialBranches,
    _identity_friendly,
    cyclic_shift,
    cyclic_unshift,
    global_tokens,
    neighbor_tokens,
    shift_masks,
    window_merge,
    window_partition,
)


def pairing(t: int, offset: int = 0) -> List[int]:
    """Supporting frame index for every reference frame.

    Frames form disjoint adjacent pairs starting at ``offset`` (wrapping at the
    end), and each frame of a pair is the other's supporting frame.
    """
    if t < 2 or t % 2:
        raise ValueError(f"pairing needs an even frame count >= 2, got {t}")
    partner = [0] * t
    for k in range(t // 2):
        a = (offset + 2 * k) % t
        b = (offset + 2 * k + 1) % t
        partner[a], partner[b] = b, a
    return partner


def tma(ref_windows, sup_windows, proj: Projection, mask=None, return_attn=False):
    return proj.attend(ref_windows, sup_windows, mask, return_attn)


def gtma(ref_windows, sup_map, window, proj: Projection, return_attn=False):
    return proj.attend(ref_windows, global_tokens(sup_map, window), None, return_attn)


def ntma(ref_windows, sup_map, window, factor, proj: Projection, return_attn=False):
    return proj.attend(ref_windows, neighbor_tokens(sup_map, window, factor), None, return_attn)


def pad_frames(x: torch.Tensor) -> torch.Tensor:
    """Replicate the last frame of ``B×T×...`` when T is odd."""
    if x.shape[1] % 2:
        x = torch.cat([x, x[:, -1:]], dim=1)
    return x


class MTSA(nn.Module):
    """Pre-norm residual unit fusing TMA, GTMA|NTMA and the spatial branches."""

    def __init__(self, c: int, t_cfg: AttentionConfig, s_cfg: AttentionConfig, index: int = 0,
                 mlp_ratio: float = 2.0, drop: float = 0.0, temporal_multi_branch: bool = True,
                 spatial_multi_branch: bool = True):
        super().__init__()
        self.t_cfg = t_cfg
        self.offset = index % 2
        self.shift = (t_cfg.window[0] // 2, t_cfg.window[1] // 2) if index % 2 else (0, 0)
        self.multi_branch = temporal_multi_branch
        self.norm1 = nn.LayerNorm(c)
        self.tma = Projection(c, t_cfg.dim, t_cfg.heads)
        if temporal_multi_branch:
            name = "gtma" if t_cfg.use_global else "ntma"
            setattr(self, name, Projection(c, t_cfg.half, t_cfg.heads))
        self.spatial = SpatialBranches(c, s_cfg, spatial_multi_branch)
        self.fusion = nn.Linear(self.temporal_width + self.spatial.width, c)
        _identity_friendly(self.fusion)
        self.norm2 = nn.LayerNorm(c)
        self.mlp = RepMLP(c, int(c * mlp_ratio), drop)

    @property
    def temporal_width(self) -> int:
        return self.t_cfg.dim + (self.t_cfg.half if self.multi_branch else 0)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        b, t, h, w, c = x.shape
        cfg = self.t_cfg
        y = cyclic_shift(self.norm1(x).reshape(b * t, h, w, c), self.shift).reshape(b, t, h, w, c)
        sup = y[:, pairing(t, self.offset)]
        y = y.reshape(b * t, h, w, c)
        sup = sup.reshape(b * t, h, w, c)
        masks = shift_masks(h, w, cfg.window, self.shift)
        ref_win = window_partition(y, cfg.window)
        outs = [tma(ref_win, window_partition(sup, cfg.window), self.tma, masks[0])]
        if self.multi_branch:
            if cfg.use_global:
                outs.append(gtma(ref_win, sup, cfg.window, self.gtma))
            else:
                outs.append(ntma(ref_win, sup, cfg.window, cfg.neighbor_factor, self.ntma))
        outs.append(self.spatial(y, ref_win, masks))
        out = window_merge(torch.cat(outs, dim=-1), cfg.window, h, w)
        out = cyclic_unshift(out, self.shift)
        return self.fusion(out).reshape(b, t, h, w, c)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        t = x.shape[1]
        x = pad_frames(x)
        x = x + self.attention(x)
        x = x + self.mlp(self.norm2(x))
        return x[:, :t]

    def count_macs(self, frames: int, h: int, w: int) -> int:
        cfg = self.t_cfg
        n = cfg.tokens
        nw = (h // cfg.window[0]) * (w // cfg.window[1])
        macs = nw * self.tma.count_macs(n, n)
        if self.multi_branch:
            if cfg.use_global:
                c, d = self.gtma.P_Q.shape
                macs += nw * self.gtma.count_macs(n, n, kv_tokens=0) + 2 * n * c * d
            else:
                macs += nw * self.ntma.count_macs(n, n)
        macs += self.spatial.count_macs(h, w)
        tokens = frames * h * w
        return (frames * macs + tokens * self.fusion.in_features * self.fusion.out_features
                + self.mlp.count_macs(tokens))


class MTSAG(nn.Module):
    """``N_T`` MTSA units; shift and pairing offset alternate unit to unit."""

    def __init__(self, c: int, t_cfg: AttentionConfig, s_cfg: AttentionConfig, depth: int,
                 mlp_ratio: float = 2.0, drop: float = 0.0, temporal_multi_branch: bool = True,
                 spatial_multi_branch: bool = True):
        super().__init__()
        if depth < 1:
            raise ValueError("group depth must be >= 1")
        self.units = nn.ModuleList(
            MTSA(c, t_cfg, s_cfg, i, mlp_ratio, drop, temporal_multi_branch, spatial_multi_branch)
            for i in range(depth)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for unit in self.units:
            x = unit(x)
        return x

    def count_macs(self, frames: int, h: int, w: int) -> int:
        return sum(u.count_macs(frames, h, w) for u in self.units)


class MTSB(nn.Module):
    """``x + RepConv(MTSAG(x))`` with the convolution tail applied per frame."""

    def __init__(self, c: int, t_cfg: AttentionConfig, s_cfg: AttentionConfig, depth: int,
                 mlp_ratio: float = 2.0, drop: float = 0.0, temporal_multi_branch: bool = True,
                 spatial_multi_branch: bool = True):
        super().__init__()
        self.group = MTSAG(c, t_cfg, s_cfg, depth, mlp_ratio, drop, temporal_multi_branch,
                           spatial_multi_branch)
        self.tail = RepConv(c, c, c)
        with torch.no_grad():
            self.tail.conv.weight.mul_(0.1)
            self.tail.conv.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, h, w, c = x.shape
        y = self.group(x).reshape(b * t, h, w, c)
        return x + self.tail(y).reshape(b, t, h, w, c)

    def count_macs(self, frames: int, h: int, w: int) -> int:
        return self.group.count_macs(frames, h, w) + self.tail.count_macs(frames, h, w)
