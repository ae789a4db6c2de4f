"""Finite-difference audits of every differentiable operation (float64)."""

from __future__ import annotations

from typing import Callable, Dict, List, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import numerics as nx
from .model import LossWeights, build_model, preset, supervised_loss
from .raw import toy_isp_tensor
from .reparam import RepConv, RepMLP
from .spatial import Projection, gwsa, lwsa, nwsa, swsa, window_partition, shift_masks
from .temporal import gtma, ntma, tma

STEP = 1e-4
TOLERANCE = 1e-3


def check_function(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], seed: int = 0,
                   step: float = STEP) -> float:
    """Max relative error between autograd and central differences for the
    scalar ``sum(fn(*inputs) * probe)`` with a fixed random probe."""
    inputs = [x.detach().double().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    probe = torch.randn(out.shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)

    def scalar():
        return (fn(*inputs) * probe).sum()

    analytic = torch.autograd.grad(scalar(), inputs)
    return max(nx.max_relative_error(a, nx.central_difference(scalar, x, step)) for a, x in zip(analytic, inputs))


def check_module(module: nn.Module, inputs: Sequence[torch.Tensor], seed: int = 0, step: float = STEP,
                 max_entries: int = 64) -> float:
    """Same audit over a module's parameters (sampled) and its inputs."""
    module = module.double()
    inputs = [x.detach().double().requires_grad_(True) for x in inputs]
    gen = torch.Generator().manual_seed(seed)
    probe = torch.randn(module(*inputs).shape, generator=gen, dtype=torch.float64)

    def scalar():
        return (module(*inputs) * probe).sum()

    targets = list(inputs) + [p for p in module.parameters()]
    analytic = torch.autograd.grad(scalar(), targets, allow_unused=True)
    worst = 0.0
    for a, x in zip(analytic, targets):
        a = torch.zeros_like(x) if a is None else a
        n = x.numel()
        idx = torch.randperm(n, generator=gen)[:max_entries].tolist()
        num = nx.central_difference(scalar, x, step, idx)
        worst = max(worst, nx.max_relative_error(a.reshape(-1)[idx], num.reshape(-1)[idx]))
    return worst


def end_to_end_error(seed: int = 0, n_entries: int = 48, step: float = STEP) -> float:
    """Supervised loss of the micro model vs sampled parameter entries."""
    torch.manual_seed(seed)
    model = build_model(preset("micro"), seed).double()
    gen = torch.Generator().manual_seed(seed)
    noisy = 0.1 + 0.3 * torch.rand(1, 2, 4, 16, 16, generator=gen, dtype=torch.float64)
    clean = 0.1 + 0.3 * torch.rand(1, 2, 4, 16, 16, generator=gen, dtype=torch.float64)
    weights = LossWeights()

    def loss():
        return supervised_loss(model(noisy), clean, weights)

    params = dict(model.named_parameters())
    grads = nx.backward(loss(), params)
    names = sorted(params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_entries):
        name = names[int(rng.integers(len(names)))]
        p = params[name]
        i = int(rng.integers(p.numel()))
        num = nx.central_difference(loss, p, step, [i]).reshape(-1)[i]
        worst = max(worst, nx.max_relative_error(grads[name].reshape(-1)[i:i + 1], num.reshape(1)))
    return worst


def _rand(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(*shape, generator=g, dtype=torch.float64) * 2 - 1


def run_all(seed: int = 0, include_model: bool = True) -> Dict[str, float]:
    """Per-operation max relative error table."""
    torch.manual_seed(seed)
    c, window = 4, (4, 4)
    proj = Projection(c, 4, 2).double()
    fmap = _rand(1, 8, 8, c, seed=seed + 1)
    sup = _rand(1, 8, 8, c, seed=seed + 2)
    mask = shift_masks(8, 8, window, (2, 2))[0]

    def wins(x):
        return window_partition(x, window)

    table: Dict[str, float] = {
        "matmul": check_function(nx.matmul, [_rand(3, 4, seed=seed), _rand(4, 2, seed=seed + 1)]),
        "softmax_rows": check_function(nx.softmax_rows, [_rand(3, 5, seed=seed)]),
        "conv2d_3x3": check_function(nx.conv2d, [_rand(2, 5, 5, seed=seed), _rand(3, 2, 3, 3, seed=seed + 1),
                                                  _rand(3, seed=seed + 2)]),
        "conv2d_1x1": check_function(nx.conv2d, [_rand(2, 5, 5, seed=seed), _rand(3, 2, 1, 1, seed=seed + 1)]),
        "adaptive_avg_downsample": check_function(lambda x: nx.adaptive_avg_downsample(x, 2, 3),
                                                  [_rand(2, 4, 6, seed=seed)]),
        "layer_norm": check_function(nx.layer_norm, [_rand(5, 6, seed=seed), _rand(6, seed=seed + 1),
                                                     _rand(6, seed=seed + 2)]),
        "gelu": check_function(nx.gelu, [_rand(4, 5, seed=seed)]),
        "toy_isp": check_function(toy_isp_tensor, [0.1 + 0.3 * (_rand(4, 3, 3, seed=seed) + 1) / 2]),
        "swsa": check_function(lambda x: swsa(wins(x), proj), [fmap]),
        "swsa_shifted": check_function(lambda x: swsa(wins(x), proj, mask), [fmap]),
        "lwsa": check_function(lambda x: lwsa(wins(x), window, proj), [fmap]),
        "gwsa": check_function(lambda x: gwsa(wins(x), x, window, proj), [fmap]),
        "nwsa": check_function(lambda x: nwsa(wins(x), x, window, 3, proj), [fmap]),
        "tma": check_function(lambda r, s: tma(wins(r), wins(s), proj), [fmap, sup]),
        "gtma": check_function(lambda r, s: gtma(wins(r), s, window, proj), [fmap, sup]),
        "ntma": check_function(lambda r, s: ntma(wins(r), s, window, 3, proj), [fmap, sup]),
        "repmlp": check_module(RepMLP(c, 8), [_rand(2, 3, c, seed=seed)]),
        "repconv": check_module(RepConv(c, 3, 2), [_rand(1, 5, 5, c, seed=seed)]),
    }
    if include_model:
        table["end_to_end_supervised"] = end_to_end_error(seed)
    return table


def format_table(table: Dict[str, float], tol: float = TOLERANCE) -> List[str]:
    lines = [f"{'operation':<26} {'max rel err':>12}  status"]
    for name, err in table.items():
        lines.append(f"{name:<26} {err:12.3e}  {'ok' if err <= tol else 'FAIL'}")
    return lines
