"""Dense tensor primitives with reverse-mode gradients.

Everything here is a thin, shape-checked layer over torch so the rest of the
package speaks one small vocabulary. Tensors are ``torch.Tensor``; gradients
come from torch autograd. Finite-difference helpers at the bottom are the
independent oracle used by the gradient checks.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence

import torch
import torch.nn.functional as F

GradientRecord = Dict[str, torch.Tensor]


class NonFiniteError(ValueError):
    """Raised when a tensor that must be finite contains NaN or Inf."""


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"{what} contains non-finite values")
    return x


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def softmax_rows(a: torch.Tensor) -> torch.Tensor:
    """Row softmax over the last axis; max-subtraction keeps exp in range."""
    shifted = a - a.amax(dim=-1, keepdim=True)
    e = shifted.exp()
    return e / e.sum(dim=-1, keepdim=True)


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Same-size cross-correlation with zero padding.

    Accepts ``C×H×W`` or batched ``B×C×H×W`` input; only odd kernels 1 and 3.
    """
    k = weight.shape[-1]
    if k not in (1, 3) or weight.shape[-2] != k:
        raise ValueError(f"unsupported kernel size {tuple(weight.shape[-2:])}")
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input {x.shape[1]}, weight {weight.shape[1]}")
    out = F.conv2d(x, weight, bias, padding=k // 2)
    return out.squeeze(0) if squeeze else out


def adaptive_avg_downsample(x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Area-average ``...×H×W`` to ``...×out_h×out_w``."""
    if out_h <= 0 or out_w <= 0:
        raise ValueError("output extents must be positive")
    h, w = x.shape[-2:]
    if out_h > h or out_w > w:
        raise ValueError(f"cannot downsample {h}x{w} to {out_h}x{out_w}")
    if (out_h, out_w) == (h, w):
        return x
    lead = x.shape[:-2]
    y = F.adaptive_avg_pool2d(x.reshape(-1, 1, h, w), (out_h, out_w))
    return y.reshape(*lead, out_h, out_w)


def layer_norm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if weight.shape[-1] != x.shape[-1]:
        raise ValueError("layer_norm affine width does not match channel axis")
    return F.layer_norm(x, (x.shape[-1],), weight, bias, eps)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def dropout(x: torch.Tensor, p: float, training: bool) -> torch.Tensor:
    if not training or p == 0.0:
        return x
    return F.dropout(x, p, training=True)


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a + b


def scale(a: torch.Tensor, s: float) -> torch.Tensor:
    return a * s


def reshape(a: torch.Tensor, shape: Sequence[int]) -> torch.Tensor:
    return a.reshape(tuple(shape))


def permute(a: torch.Tensor, order: Sequence[int]) -> torch.Tensor:
    return a.permute(*order)


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> GradientRecord:
    """Gradients of a scalar loss for every parameter that requires them.

    Parameters the loss never touched get an explicit zero gradient.
    """
    if loss.numel() != 1:
        raise ValueError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    if loss.grad_fn is None:
        raise ValueError("loss has no recorded graph")
    names = [n for n, p in params.items() if p.requires_grad]
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    record: GradientRecord = {}
    for name, g in zip(names, grads):
        p = params[name]
        record[name] = torch.zeros_like(p) if g is None else g.detach()
    return record


# --- finite-difference oracle -------------------------------------------------


def central_difference(
    fn: Callable[[], torch.Tensor],
    target: torch.Tensor,
    step: float = 1e-4,
    indices: Optional[Iterable[int]] = None,
) -> torch.Tensor:
    """Numerical gradient of scalar ``fn()`` w.r.t. entries of ``target``.

    ``target`` is perturbed in place and restored. When ``indices`` (flat
    positions) is given, only those entries are evaluated; the rest stay zero.
    """
    grad = torch.zeros_like(target)
    flat = target.data.view(-1)
    positions = range(flat.numel()) if indices is None else [int(i) for i in indices]
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in positions:
            orig = flat[i].item()
            flat[i] = orig + step
            up = float(fn())
            flat[i] = orig - step
            down = float(fn())
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
    return grad


def max_relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-5) -> float:
    """``max |a - n| / max(|a|, |n|, floor)`` over all entries."""
    a = analytic.detach().double()
    n = numeric.detach().double()
    denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, floor))
    if a.numel() == 0:
        return 0.0
    return float(((a - n).abs() / denom).max())
