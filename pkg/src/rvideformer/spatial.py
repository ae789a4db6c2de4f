"""Window machinery and the multi-branch spatial self-attention.

Feature maps are channel-last ``B×H×W×C``. Windows are ``(B·nW)×N×C`` with
windows in row-major order per map and tokens row-major inside a window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .numerics import adaptive_avg_downsample, softmax_rows
from .reparam import RepConv, RepMLP

MASK_VALUE = -1e9


@dataclass(frozen=True)
class AttentionConfig:
    window: Tuple[int, int] = (8, 8)
    dim: int = 12  # D, SWSA / TMA projected width
    heads: int = 2
    neighbor_factor: int = 3
    use_global: bool = False  # GWSA instead of NWSA (low-resolution levels)

    @property
    def tokens(self) -> int:
        return self.window[0] * self.window[1]

    @property
    def half(self) -> int:
        return self.dim // 2


def branch_heads(width: int, heads: int) -> int:
    """Largest head count <= ``heads`` that divides ``width``."""
    for h in range(min(heads, width), 0, -1):
        if width % h == 0:
            return h
    raise ValueError(f"branch width must be positive, got {width}")


# --- windows -----------------------------------------------------------------


def window_partition(x: torch.Tensor, window: Tuple[int, int]) -> torch.Tensor:
    b, h, w, c = x.shape
    wh, ww = window
    if h % wh or w % ww:
        raise ValueError(f"map {h}x{w} is not divisible by window {wh}x{ww}")
    x = x.reshape(b, h // wh, wh, w // ww, ww, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, wh * ww, c)


def window_merge(windows: torch.Tensor, window: Tuple[int, int], h: int, w: int) -> torch.Tensor:
    wh, ww = window
    c = windows.shape[-1]
    x = windows.reshape(-1, h // wh, w // ww, wh, ww, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, h, w, c)


def cyclic_shift(x: torch.Tensor, shift: Tuple[int, int]) -> torch.Tensor:
    if shift == (0, 0):
        return x
    return torch.roll(x, shifts=(-shift[0], -shift[1]), dims=(1, 2))


def cyclic_unshift(x: torch.Tensor, shift: Tuple[int, int]) -> torch.Tensor:
    if shift == (0, 0):
        return x
    return torch.roll(x, shifts=shift, dims=(1, 2))


def shift_region_labels(h: int, w: int, window: Tuple[int, int], shift: Tuple[int, int]) -> torch.Tensor:
    """Region id of every pixel of the rolled map, ``H×W``.

    Pixels that wrapped around from the far edge get their own ids so masked
    attention never mixes them with their new, non-adjacent neighbours.
    """
    labels = torch.zeros(h, w, dtype=torch.long)
    if shift == (0, 0):
        return labels
    wh, ww = window
    sh, sw = shift
    cnt = 0
    for hs in (slice(0, h - wh), slice(h - wh, h - sh), slice(h - sh, h)):
        for ws in (slice(0, w - ww), slice(w - ww, w - sw), slice(w - sw, w)):
            labels[hs, ws] = cnt
            cnt += 1
    return labels


def region_mask(q_labels: torch.Tensor, k_labels: torch.Tensor) -> torch.Tensor:
    """``nW×N×M`` additive mask from per-window query and key region ids."""
    same = q_labels.unsqueeze(-1) == k_labels.unsqueeze(-2)
    return torch.where(same, 0.0, MASK_VALUE)


def shift_masks(h: int, w: int, window: Tuple[int, int], shift: Tuple[int, int]):
    """Masks for window keys (``nW×N×N``) and 2x-pooled keys (``nW×N×N/4``),
    or ``(None, None)`` without a shift."""
    if shift == (0, 0):
        return None, None
    labels = shift_region_labels(h, w, window, shift)
    win = window_partition(labels.view(1, h, w, 1), window)[..., 0]
    wh, ww = window
    # a pooled cell takes the id of its top-left pixel
    pooled = labels.view(1, h, w, 1)[:, ::2, ::2]
    pwin = window_partition(pooled, (wh // 2, ww // 2))[..., 0] if wh % 2 == 0 and ww % 2 == 0 else None
    full = region_mask(win, win)
    low = region_mask(win, pwin) if pwin is not None else None
    return full, low


# --- attention core ----------------------------------------------------------


def window_attention(
    q_in: torch.Tensor,
    kv_in: torch.Tensor,
    p_q: torch.Tensor,
    p_k: torch.Tensor,
    p_v: torch.Tensor,
    heads: int,
    mask: Optional[torch.Tensor] = None,
    return_attn: bool = False,
):
    """Multi-head attention of ``q_in`` (``B×N×C``) over ``kv_in`` (``B×M×C``).

    ``mask`` is ``nW×N×M`` with B a multiple of nW (windows innermost).
    Scores are scaled by the per-head width.
    """
    q = q_in @ p_q
    k = kv_in @ p_k
    v = kv_in @ p_v
    b, n, d = q.shape
    m = k.shape[1]
    if d % heads:
        raise ValueError(f"projected width {d} not divisible by {heads} heads")
    hd = d // heads
    q = q.reshape(b, n, heads, hd).transpose(1, 2)
    k = k.reshape(b, m, heads, hd).transpose(1, 2)
    v = v.reshape(b, m, heads, hd).transpose(1, 2)
    scores = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
    if mask is not None:
        nw = mask.shape[0]
        scores = scores.reshape(b // nw, nw, heads, n, m) + mask.to(scores.dtype)[None, :, None]
        scores = scores.reshape(b, heads, n, m)
    attn = softmax_rows(scores)
    out = (attn @ v).transpose(1, 2).reshape(b, n, d)
    return (out, attn) if return_attn else out


class Projection(nn.Module):
    """Query/key/value projection matrices ``C×D`` (bias-free)."""

    def __init__(self, c: int, d: int, heads: int):
        super().__init__()
        std = c ** -0.5
        self.P_Q = nn.Parameter(torch.randn(c, d) * std)
        self.P_K = nn.Parameter(torch.randn(c, d) * std)
        self.P_V = nn.Parameter(torch.randn(c, d) * std)
        self.heads = branch_heads(d, heads)

    @property
    def width(self) -> int:
        return self.P_Q.shape[1]

    def attend(self, q_in, kv_in, mask=None, return_attn=False):
        return window_attention(q_in, kv_in, self.P_Q, self.P_K, self.P_V, self.heads, mask, return_attn)

    def count_macs(self, n_q: int, n_kv: int, kv_tokens: Optional[int] = None) -> int:
        """Per-window MACs; ``kv_tokens`` overrides how many tokens are projected
        to keys/values (shared global windows project once per map)."""
        c, d = self.P_Q.shape
        kv_tokens = n_kv if kv_tokens is None else kv_tokens
        return n_q * c * d + 2 * kv_tokens * c * d + 2 * n_q * n_kv * d


# --- key/value contexts ------------------------------------------------------


def low_res_tokens(windows: torch.Tensor, window: Tuple[int, int]) -> torch.Tensor:
    """2x2 average pool of each window: ``B×N×C`` -> ``B×(N/4)×C``."""
    wh, ww = window
    if wh % 2 or ww % 2:
        raise ValueError(f"low-resolution branch needs even window extents, got {window}")
    b, n, c = windows.shape
    x = windows.reshape(b, wh // 2, 2, ww // 2, 2, c).mean(dim=(2, 4))
    return x.reshape(b, n // 4, c)


def global_tokens(fmap: torch.Tensor, window: Tuple[int, int]) -> torch.Tensor:
    """Whole map area-averaged to one window, repeated for every window."""
    b, h, w, c = fmap.shape
    wh, ww = window
    g = adaptive_avg_downsample(fmap.permute(0, 3, 1, 2), wh, ww)  # B×C×h×w
    g = g.permute(0, 2, 3, 1).reshape(b, 1, wh * ww, c)
    nw = (h // wh) * (w // ww)
    return g.expand(b, nw, wh * ww, c).reshape(b * nw, wh * ww, c)


def neighbor_tokens(fmap: torch.Tensor, window: Tuple[int, int], factor: int) -> torch.Tensor:
    """Per window, the ``f·h×f·w`` area centred on it (zero padded outside the
    map) averaged down to ``h×w`` tokens: ``(B·nW)×N×C``."""
    b, h, w, c = fmap.shape
    wh, ww = window
    if factor < 1 or ((factor - 1) * wh) % 2 or ((factor - 1) * ww) % 2:
        raise ValueError(f"neighbor factor {factor} cannot be centred on a {wh}x{ww} window")
    ph, pw = (factor - 1) * wh // 2, (factor - 1) * ww // 2
    x = fmap.permute(0, 3, 1, 2)
    x = F.pad(x, (pw, pw, ph, ph))
    if factor > 1:
        x = F.avg_pool2d(x, factor, stride=1)
    # cell (u, v) of window (a, b) starts at padded (a·h + f·u, b·w + f·v)
    rows = (torch.arange(h // wh) * wh)[:, None] + factor * torch.arange(wh)[None, :]
    cols = (torch.arange(w // ww) * ww)[:, None] + factor * torch.arange(ww)[None, :]
    x = x[:, :, rows[:, None, :, None], cols[None, :, None, :]]  # B×C×nh×nw×wh×ww
    return x.permute(0, 2, 3, 4, 5, 1).reshape(-1, wh * ww, c)


# --- single-branch functional forms ------------------------------------------


def swsa(windows, proj: Projection, mask=None, return_attn=False):
    return proj.attend(windows, windows, mask, return_attn)


def lwsa(windows, window, proj: Projection, mask=None, return_attn=False):
    return proj.attend(windows, low_res_tokens(windows, window), mask, return_attn)


def gwsa(windows, fmap, window, proj: Projection, return_attn=False):
    return proj.attend(windows, global_tokens(fmap, window), None, return_attn)


def nwsa(windows, fmap, window, factor, proj: Projection, return_attn=False):
    return proj.attend(windows, neighbor_tokens(fmap, window, factor), None, return_attn)


# --- blocks ------------------------------------------------------------------


class SpatialBranches(nn.Module):
    """SWSA + LWSA + (GWSA | NWSA) over windows of one map, outputs concatenated.

    With ``multi_branch=False`` only SWSA runs (ablation baseline).
    """

    def __init__(self, c: int, cfg: AttentionConfig, multi_branch: bool = True):
        super().__init__()
        self.cfg = cfg
        self.multi_branch = multi_branch
        self.swsa = Projection(c, cfg.dim, cfg.heads)
        if multi_branch:
            self.lwsa = Projection(c, cfg.half, cfg.heads)
            name = "gwsa" if cfg.use_global else "nwsa"
            setattr(self, name, Projection(c, cfg.half, cfg.heads))

    @property
    def context(self) -> Optional[Projection]:
        if not self.multi_branch:
            return None
        return self.gwsa if self.cfg.use_global else self.nwsa

    @property
    def width(self) -> int:
        return self.cfg.dim + (2 * self.cfg.half if self.multi_branch else 0)

    def forward(self, fmap: torch.Tensor, windows: torch.Tensor, masks) -> torch.Tensor:
        cfg = self.cfg
        full_mask, low_mask = masks
        outs = [swsa(windows, self.swsa, full_mask)]
        if self.multi_branch:
            outs.append(lwsa(windows, cfg.window, self.lwsa, low_mask))
            if cfg.use_global:
                outs.append(gwsa(windows, fmap, cfg.window, self.gwsa))
            else:
                outs.append(nwsa(windows, fmap, cfg.window, cfg.neighbor_factor, self.nwsa))
        return torch.cat(outs, dim=-1)

    def count_macs(self, h: int, w: int) -> int:
        n = self.cfg.tokens
        nw = (h // self.cfg.window[0]) * (w // self.cfg.window[1])
        macs = nw * self.swsa.count_macs(n, n)
        if self.multi_branch:
            macs += nw * self.lwsa.count_macs(n, n // 4)
            if self.cfg.use_global:
                c, d = self.gwsa.P_Q.shape
                macs += nw * self.gwsa.count_macs(n, n, kv_tokens=0) + 2 * n * c * d
            else:
                macs += nw * self.nwsa.count_macs(n, n)
        return macs


def _identity_friendly(linear: nn.Linear, gain: float = 0.1) -> None:
    with torch.no_grad():
        linear.weight.mul_(gain)
        linear.bias.zero_()


class MSSA(nn.Module):
    """Pre-norm residual unit: LN -> branches -> 1x1 fusion -> add; LN -> RepMLP -> add."""

    def __init__(self, c: int, cfg: AttentionConfig, shift: bool = False, mlp_ratio: float = 2.0,
                 drop: float = 0.0, multi_branch: bool = True):
        super().__init__()
        self.cfg = cfg
        self.shift = (cfg.window[0] // 2, cfg.window[1] // 2) if shift else (0, 0)
        self.norm1 = nn.LayerNorm(c)
        self.branches = SpatialBranches(c, cfg, multi_branch)
        self.fusion = nn.Linear(self.branches.width, c)
        _identity_friendly(self.fusion)
        self.norm2 = nn.LayerNorm(c)
        self.mlp = RepMLP(c, int(c * mlp_ratio), drop)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, c = x.shape
        y = cyclic_shift(self.norm1(x), self.shift)
        masks = shift_masks(h, w, self.cfg.window, self.shift)
        windows = window_partition(y, self.cfg.window)
        out = self.branches(y, windows, masks)
        out = cyclic_unshift(window_merge(out, self.cfg.window, h, w), self.shift)
        return self.fusion(out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attention(x)
        return x + self.mlp(self.norm2(x))

    def count_macs(self, frames: int, h: int, w: int) -> int:
        tokens = frames * h * w
        return (frames * self.branches.count_macs(h, w)
                + tokens * self.fusion.in_features * self.fusion.out_features
                + self.mlp.count_macs(tokens))


class MSSAG(nn.Module):
    """``N_S`` MSSA units with the window shift on every odd unit."""

    def __init__(self, c: int, cfg: AttentionConfig, depth: int, mlp_ratio: float = 2.0,
                 drop: float = 0.0, multi_branch: bool = True):
        super().__init__()
        if depth < 1:
            raise ValueError("group depth must be >= 1")
        self.units = nn.ModuleList(
            MSSA(c, cfg, shift=bool(i % 2), mlp_ratio=mlp_ratio, drop=drop, multi_branch=multi_branch)
            for i in range(depth)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for unit in self.units:
            x = unit(x)
        return x

    def count_macs(self, frames: int, h: int, w: int) -> int:
        return sum(u.count_macs(frames, h, w) for u in self.units)


class MSSB(nn.Module):
    """``x + RepConv(MSSAG(x))``; the group's trailing linear is RepConv's 1x1 stage."""

    def __init__(self, c: int, cfg: AttentionConfig, depth: int, mlp_ratio: float = 2.0,
                 drop: float = 0.0, multi_branch: bool = True):
        super().__init__()
        self.group = MSSAG(c, cfg, depth, mlp_ratio, drop, multi_branch)
        self.tail = RepConv(c, c, c)
        with torch.no_grad():
            self.tail.conv.weight.mul_(0.1)
            self.tail.conv.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``x``: ``B×H×W×C`` (frames folded into B)."""
        return x + self.tail(self.group(x))

    def count_macs(self, frames: int, h: int, w: int) -> int:
        return self.group.count_macs(frames, h, w) + self.tail.count_macs(frames, h, w)
