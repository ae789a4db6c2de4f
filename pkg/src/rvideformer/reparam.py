"""Train-time multi-branch units and their inference-time fusion.

RepMLP keeps two parallel linear layers in front of the GELU; they collapse
into one by summing weights and biases. RepConv is the trailing linear layer
of an attention group followed by a 3x3 convolution; the pair collapses into
a single 3x3 convolution.
"""

from __future__ import annotations

import copy
from typing import Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F


class AlreadyFusedError(RuntimeError):
    pass


class UnfusableError(RuntimeError):
    pass


def fuse_parallel_linear(
    w1: torch.Tensor, b1: torch.Tensor, w2: torch.Tensor, b2: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    if w1.shape != w2.shape or b1.shape != b2.shape:
        raise ValueError(f"parallel branches disagree: {tuple(w1.shape)} vs {tuple(w2.shape)}")
    return w1 + w2, b1 + b2


def fuse_linear_into_conv(
    w_c1: torch.Tensor, b_c1: torch.Tensor, w_c2: torch.Tensor, b_c2: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Collapse ``conv3x3(conv1x1(x))`` into one 3x3 convolution.

    ``w_c1`` is ``C_mid×C_in`` or ``C_mid×C_in×1×1``; ``w_c2`` is ``C_out×C_mid×3×3``.
    """
    if w_c1.dim() == 4:
        if w_c1.shape[-2:] != (1, 1):
            raise UnfusableError("first stage must be 1x1")
        w_c1 = w_c1[:, :, 0, 0]
    if w_c2.shape[1] != w_c1.shape[0] or b_c1.shape[0] != w_c1.shape[0] or b_c2.shape[0] != w_c2.shape[0]:
        raise ValueError(
            f"channel chain mismatch: 1x1 {tuple(w_c1.shape)}, 3x3 {tuple(w_c2.shape)}"
        )
    w_f = torch.einsum("omkl,mi->oikl", w_c2, w_c1)
    b_f = torch.einsum("omkl,m->o", w_c2, b_c1) + b_c2
    return w_f, b_f


class RepMLP(nn.Module):
    """Two parallel linears -> GELU -> dropout -> linear, on channel-last input."""

    def __init__(self, dim: int, hidden: int, drop: float = 0.0):
        super().__init__()
        self.fc1a = nn.Linear(dim, hidden)
        self.fc1b = nn.Linear(dim, hidden)
        self.drop = nn.Dropout(drop)
        self.fc2 = nn.Linear(hidden, dim)
        self.fused = False

    def hidden_pre(self, x: torch.Tensor) -> torch.Tensor:
        if self.fused:
            return self.fc1(x)
        return self.fc1a(x) + self.fc1b(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.drop(F.gelu(self.hidden_pre(x))))

    def fuse(self) -> None:
        if self.fused:
            raise AlreadyFusedError("RepMLP already fused")
        w, b = fuse_parallel_linear(self.fc1a.weight, self.fc1a.bias, self.fc1b.weight, self.fc1b.bias)
        self.fc1 = nn.Linear(w.shape[1], w.shape[0], dtype=w.dtype, device=w.device)
        with torch.no_grad():
            self.fc1.weight.copy_(w)
            self.fc1.bias.copy_(b)
        del self.fc1a, self.fc1b
        self.fused = True

    def count_macs(self, tokens: int) -> int:
        dim, hidden = self.fc2.out_features, self.fc2.in_features
        branches = 1 if self.fused else 2
        return tokens * dim * hidden * (branches + 1)


class RepConv(nn.Module):
    """Linear (1x1) stage followed by a 3x3 convolution, channel-last in and out.

    Unfused, the 3x3 stage pads its input with the 1x1 stage's response to
    zeros (its bias) rather than with zeros, so it matches the fused
    convolution applied to a zero-padded input at every pixel.
    """

    def __init__(self, c_in: int, c_mid: int, c_out: int):
        super().__init__()
        self.pre = nn.Linear(c_in, c_mid)
        self.conv = nn.Conv2d(c_mid, c_out, 3, padding=1)
        self.fused = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = x.permute(0, 3, 1, 2)
        if self.fused:
            y = self.conv(y)
        else:
            y = self.pre(x).permute(0, 3, 1, 2)
            b = self.pre.bias.view(1, -1, 1, 1)
            y = F.pad(y - b, (1, 1, 1, 1)) + b
            y = F.conv2d(y, self.conv.weight, self.conv.bias)
        return y.permute(0, 2, 3, 1)

    def fuse(self) -> None:
        if self.fused:
            raise AlreadyFusedError("RepConv already fused")
        w, b = fuse_linear_into_conv(self.pre.weight, self.pre.bias, self.conv.weight, self.conv.bias)
        conv = nn.Conv2d(w.shape[1], w.shape[0], 3, padding=1, dtype=w.dtype, device=w.device)
        with torch.no_grad():
            conv.weight.copy_(w)
            conv.bias.copy_(b)
        self.conv = conv
        del self.pre
        self.fused = True

    def count_macs(self, frames: int, h: int, w: int) -> int:
        c_out, c_in = self.conv.out_channels, self.conv.in_channels
        macs = frames * c_out * c_in * 9 * h * w
        if not self.fused:
            macs += frames * h * w * self.pre.in_features * self.pre.out_features
        return macs


def fusion_sites(module: nn.Module):
    return [m for m in module.modules() if isinstance(m, (RepMLP, RepConv))]


def fuse_module(module: nn.Module, allow_fused: bool = False) -> nn.Module:
    """Return a fused deep copy; the input module is left untouched.

    A module with no unfused sites left raises ``AlreadyFusedError`` unless
    ``allow_fused`` is set, in which case the copy is returned unchanged.
    """
    sites = fusion_sites(module)
    if sites and all(s.fused for s in sites):
        if allow_fused:
            return copy.deepcopy(module)
        raise AlreadyFusedError("model is already in inference topology")
    fused = copy.deepcopy(module)
    for site in fusion_sites(fused):
        if not site.fused:
            site.fuse()
    if hasattr(fused, "fused"):
        fused.fused = True
    return fused
