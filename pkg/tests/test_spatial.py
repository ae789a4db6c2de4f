import numpy as np
import pytest
import torch

from oracles import (
    dense_attention,
    global_pool_tokens,
    neighbor_pool_tokens,
    pooled_tokens,
    proj_arrays,
    shifted_allowed,
    window_tokens,
    wrap_flags,
)
from rvideformer.reparam import fuse_module
from rvideformer.spatial import (
    MSSA,
    MSSAG,
    MSSB,
    AttentionConfig,
    Projection,
    SpatialBranches,
    branch_heads,
    cyclic_shift,
    cyclic_unshift,
    gwsa,
    lwsa,
    neighbor_tokens,
    nwsa,
    shift_masks,
    swsa,
    window_merge,
    window_partition,
)

WIN = (4, 4)
TOL = 1e-5


def rand_map(h, w, c, seed):
    return torch.from_numpy(np.random.default_rng(seed).standard_normal((1, h, w, c)))


def proj(c=4, d=4, heads=2, seed=0):
    torch.manual_seed(seed)
    return Projection(c, d, heads).double()


def grid(h, w, window=WIN):
    return [(a, b) for a in range(h // window[0]) for b in range(w // window[1])]


# --- windows and shifts ------------------------------------------------------


def test_partition_single_window():
    x = torch.randn(1, 4, 4, 3)
    assert torch.equal(window_partition(x, (4, 4))[0], x.reshape(16, 3))


def test_partition_row_major_order():
    x = torch.arange(16.0).reshape(1, 4, 4, 1)
    wins = window_partition(x, (2, 2))[..., 0]
    assert wins.tolist() == [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]]


def test_partition_merge_roundtrip():
    x = torch.randn(2, 8, 12, 5)
    assert torch.equal(window_merge(window_partition(x, (4, 4)), (4, 4), 8, 12), x)
    with pytest.raises(ValueError):
        window_partition(torch.randn(1, 6, 8, 1), (4, 4))


def test_shift_unshift_identity():
    x = torch.randn(1, 8, 8, 3)
    assert torch.equal(cyclic_shift(x, (0, 0)), x)
    assert torch.equal(cyclic_unshift(cyclic_shift(x, (2, 2)), (2, 2)), x)
    assert shift_masks(8, 8, WIN, (0, 0)) == (None, None)


def test_mask_values():
    full, low = shift_masks(8, 8, WIN, (2, 2))
    assert full.shape == (4, 16, 16) and low.shape == (4, 16, 4)
    assert set(torch.unique(full).tolist()) <= {0.0, -1e9}
    assert torch.all(full[0] == 0)


def test_region_purity():
    h, w = 8, 12
    shift = (2, 2)
    flags = wrap_flags(h, w, shift)
    # constant per (window, wrap-region) on the rolled map
    rolled = torch.zeros(1, h, w, 1, dtype=torch.float64)
    for i in range(h):
        for j in range(w):
            rolled[0, i, j, 0] = 100 * (i // 4) + 10 * (j // 4) + 2 * flags[i][j][0] + flags[i][j][1]
    p = proj(1, 2, 1)
    with torch.no_grad():
        p.P_Q.zero_()
        p.P_K.zero_()
        p.P_V.copy_(torch.tensor([[1.0, 1.0]]))
    mask = shift_masks(h, w, WIN, shift)[0]
    out = window_merge(swsa(window_partition(rolled, WIN), p, mask), WIN, h, w)
    assert torch.equal(out[..., :1], rolled)


# --- dense oracle comparisons -----------------------------------------------


def _check(got, attn, expected, exp_attn):
    assert np.abs(got - expected).max() <= TOL
    assert np.abs(attn - exp_attn).max() <= TOL


@pytest.mark.parametrize("shift", [(0, 0), (2, 2)])
def test_swsa_matches_oracle(shift):
    h, w = 8, 12
    fmap = rand_map(h, w, 4, 1)
    p = proj()
    masks = shift_masks(h, w, WIN, shift)
    out, attn = swsa(window_partition(fmap, WIN), p, masks[0], return_attn=True)
    fm, arrays = fmap[0].numpy(), proj_arrays(p)
    for k, (a, b) in enumerate(grid(h, w)):
        toks = window_tokens(fm, a, b, WIN)
        allowed = shifted_allowed(h, w, a, b, WIN, shift) if shift != (0, 0) else None
        exp, exp_attn = dense_attention(toks, toks, *arrays, p.heads, allowed)
        _check(out[k].detach().numpy(), attn[k].detach().numpy(), exp, exp_attn)


@pytest.mark.parametrize("shift", [(0, 0), (2, 2)])
def test_lwsa_matches_oracle(shift):
    h, w = 8, 8
    fmap = rand_map(h, w, 4, 2)
    p = proj(d=2)
    masks = shift_masks(h, w, WIN, shift)
    out, attn = lwsa(window_partition(fmap, WIN), WIN, p, masks[1], return_attn=True)
    assert attn.shape[-2:] == (16, 4)
    fm, arrays = fmap[0].numpy(), proj_arrays(p)
    for k, (a, b) in enumerate(grid(h, w)):
        allowed = None
        if shift != (0, 0):
            full = shifted_allowed(h, w, a, b, WIN, shift)
            # pooled key (u, v) covers pixels whose labels agree; use its top-left pixel
            allowed = full[:, [2 * u * 4 + 2 * v for u in range(2) for v in range(2)]]
        exp, exp_attn = dense_attention(window_tokens(fm, a, b, WIN), pooled_tokens(fm, a, b, WIN), *arrays, p.heads,
                                        allowed)
        _check(out[k].detach().numpy(), attn[k].detach().numpy(), exp, exp_attn)


def test_gwsa_matches_oracle():
    h, w = 8, 12
    fmap = rand_map(h, w, 4, 3)
    p = proj(d=2)
    out, attn = gwsa(window_partition(fmap, WIN), fmap, WIN, p, return_attn=True)
    fm, arrays = fmap[0].numpy(), proj_arrays(p)
    g = global_pool_tokens(fm, WIN)
    for k, (a, b) in enumerate(grid(h, w)):
        exp, exp_attn = dense_attention(window_tokens(fm, a, b, WIN), g, *arrays, p.heads)
        _check(out[k].detach().numpy(), attn[k].detach().numpy(), exp, exp_attn)


@pytest.mark.parametrize("factor", [1, 3])
def test_nwsa_matches_oracle(factor):
    h, w = 8, 12
    fmap = rand_map(h, w, 4, 4)
    p = proj(d=2)
    out, attn = nwsa(window_partition(fmap, WIN), fmap, WIN, factor, p, return_attn=True)
    fm, arrays = fmap[0].numpy(), proj_arrays(p)
    for k, (a, b) in enumerate(grid(h, w)):
        nb = neighbor_pool_tokens(fm, a, b, WIN, factor)
        exp, exp_attn = dense_attention(window_tokens(fm, a, b, WIN), nb, *arrays, p.heads)
        _check(out[k].detach().numpy(), attn[k].detach().numpy(), exp, exp_attn)


def test_attention_maps_row_stochastic():
    fmap = rand_map(8, 8, 4, 5)
    wins = window_partition(fmap, WIN)
    p = proj(d=2)
    mask_full, mask_low = shift_masks(8, 8, WIN, (2, 2))
    maps = [
        swsa(wins, p, mask_full, return_attn=True)[1],
        lwsa(wins, WIN, p, mask_low, return_attn=True)[1],
        gwsa(wins, fmap, WIN, p, return_attn=True)[1],
        nwsa(wins, fmap, WIN, 3, p, return_attn=True)[1],
    ]
    for m in maps:
        assert (m >= 0).all()
        assert torch.abs(m.sum(-1) - 1).max() <= 1e-6
    assert maps[0].shape[-2:] == (16, 16) and maps[1].shape[-2:] == (16, 4)
    assert maps[2].shape[-2:] == (16, 16) and maps[3].shape[-2:] == (16, 16)


def test_key_permutation_invariance():
    q = torch.randn(3, 16, 4, dtype=torch.float64)
    kv = torch.randn(3, 16, 4, dtype=torch.float64)
    p = proj()
    perm = torch.randperm(16)
    assert torch.abs(p.attend(q, kv) - p.attend(q, kv[:, perm])).max() <= 1e-6


# --- degenerate cases --------------------------------------------------------


def test_swsa_constant_keys_and_single_token():
    p = proj()
    win = torch.randn(1, 16, 4, dtype=torch.float64)
    with torch.no_grad():
        p.P_K.zero_()
    out = swsa(win, p)
    mean_v = (win @ p.P_V).mean(dim=1, keepdim=True)
    assert torch.allclose(out, mean_v.expand_as(out), atol=1e-12)
    one = torch.randn(2, 1, 4, dtype=torch.float64)
    assert torch.allclose(swsa(one, proj(seed=1)), one @ proj(seed=1).P_V, atol=1e-12)


def test_lwsa_two_by_two_window():
    p = proj(d=2)
    win = torch.randn(2, 4, 4, dtype=torch.float64)
    out, attn = lwsa(win, (2, 2), p, return_attn=True)
    assert attn.shape[-1] == 1 and torch.all(attn == 1)
    expected = win.mean(dim=1, keepdim=True) @ p.P_V
    assert torch.allclose(out, expected.expand_as(out), atol=1e-12)
    with pytest.raises(ValueError):
        lwsa(torch.randn(1, 9, 4), (3, 3), p)


def test_gwsa_degenerate_downsample_is_swsa():
    fmap = rand_map(4, 4, 4, 6)
    p = proj(d=2)
    wins = window_partition(fmap, WIN)
    assert torch.allclose(gwsa(wins, fmap, WIN, p), swsa(wins, p), atol=1e-12)


def test_gwsa_constant_map():
    fmap = torch.full((1, 8, 8, 4), 0.7, dtype=torch.float64)
    p = proj(d=2)
    out = gwsa(window_partition(fmap, WIN), fmap, WIN, p)
    expected = torch.full((1, 4), 0.7, dtype=torch.float64) @ p.P_V
    assert torch.allclose(out, expected.expand_as(out), atol=1e-12)


def test_nwsa_factor_one_is_swsa():
    fmap = rand_map(8, 8, 4, 7)
    p = proj(d=2)
    wins = window_partition(fmap, WIN)
    assert torch.allclose(nwsa(wins, fmap, WIN, 1, p), swsa(wins, p), atol=1e-12)


def test_nwsa_corner_coverage():
    c = 2.0
    fmap = torch.full((1, 8, 8, 1), c, dtype=torch.float64)
    toks = neighbor_tokens(fmap, WIN, 3)[0, :, 0].reshape(4, 4)
    # top-left window: the 12x12 area starts 4 rows/cols outside the map, so
    # cell (u, v) covers rows 3u-4..3u-2 and cols 3v-4..3v-2
    cover = [max(0, min(3, 3 * u - 1)) / 3 for u in range(4)]
    expected = c * np.outer(cover, cover)
    np.testing.assert_allclose(toks.numpy(), expected, atol=1e-12)


def test_nwsa_interior_constant_is_uniform():
    fmap = torch.full((1, 12, 12, 4), 0.5, dtype=torch.float64)
    p = proj(d=2)
    wins = window_partition(fmap, WIN)
    out, attn = nwsa(wins, fmap, WIN, 3, p, return_attn=True)
    centre = 4  # window (1, 1) of a 3x3 grid
    assert torch.allclose(attn[centre], torch.full_like(attn[centre], 1 / 16), atol=1e-12)
    assert torch.allclose(out[centre], (fmap[0, 0, :1] @ p.P_V).expand(16, 2), atol=1e-12)


def test_branch_heads_divisor_rule():
    assert branch_heads(24, 6) == 6
    assert branch_heads(15, 6) == 5
    assert branch_heads(7, 6) == 1


# --- units and blocks --------------------------------------------------------

CFG = AttentionConfig(window=WIN, dim=4, heads=2, neighbor_factor=3, use_global=False)


def test_branch_width_bookkeeping():
    for use_global in (False, True):
        cfg = AttentionConfig(window=WIN, dim=8, heads=2, use_global=use_global)
        assert SpatialBranches(6, cfg).width == 8 + 4 + 4
    assert SpatialBranches(6, CFG, multi_branch=False).width == 4


def test_mssa_composition_oracle():
    torch.manual_seed(0)
    unit = MSSA(6, CFG).double().eval()
    x = rand_map(8, 8, 6, 8)
    ln = unit.norm1(x)[0].detach().numpy()
    br = unit.branches
    parts = []
    for a, b in grid(8, 8):
        toks = window_tokens(ln, a, b, WIN)
        parts.append(np.concatenate([
            dense_attention(toks, toks, *proj_arrays(br.swsa), br.swsa.heads)[0],
            dense_attention(toks, pooled_tokens(ln, a, b, WIN), *proj_arrays(br.lwsa), br.lwsa.heads)[0],
            dense_attention(toks, neighbor_pool_tokens(ln, a, b, WIN, 3), *proj_arrays(br.nwsa),
                            br.nwsa.heads)[0],
        ], axis=1))
    cat = window_merge(torch.from_numpy(np.stack(parts)), WIN, 8, 8)
    y = x + unit.fusion(cat)
    expected = y + unit.mlp(unit.norm2(y))
    assert torch.abs(unit(x) - expected).max() <= 1e-10


def test_mssa_fusion_selects_swsa_slice():
    torch.manual_seed(1)
    unit = MSSA(4, CFG).double()
    with torch.no_grad():
        unit.fusion.weight.zero_()
        unit.fusion.weight[:, :4] = torch.eye(4)
        unit.fusion.bias.zero_()
    x = rand_map(8, 8, 4, 9)
    y = window_partition(unit.norm1(x), WIN)
    expected = window_merge(swsa(y, unit.branches.swsa), WIN, 8, 8)
    assert torch.allclose(unit.attention(x), expected, atol=1e-12)


def test_mssa_zero_fusion_bias_constant():
    unit = MSSA(4, CFG).double()
    with torch.no_grad():
        unit.fusion.weight.zero_()
        unit.fusion.bias.fill_(0.25)
    assert torch.allclose(unit.attention(rand_map(8, 8, 4, 1)), torch.full((1, 8, 8, 4), 0.25, dtype=torch.float64))


def test_mssag_composition_and_determinism():
    torch.manual_seed(2)
    group = MSSAG(4, CFG, 2).double()
    x = rand_map(8, 8, 4, 3)
    assert group.units[0].shift == (0, 0) and group.units[1].shift == (2, 2)
    assert torch.equal(group(x), group.units[1](group.units[0](x)))
    torch.manual_seed(2)
    again = MSSAG(4, CFG, 2).double()
    assert torch.equal(again(x), group(x))


def test_mssb_identity_tail_and_zero_input():
    torch.manual_seed(3)
    block = MSSB(4, CFG, 1).double()
    centre = torch.zeros(4, 4, 3, 3, dtype=torch.float64)
    centre[:, :, 1, 1] = torch.eye(4)
    with torch.no_grad():
        block.tail.pre.weight.copy_(torch.eye(4))
        block.tail.pre.bias.zero_()
        block.tail.conv.weight.copy_(centre)
        block.tail.conv.bias.zero_()
    x = rand_map(8, 8, 4, 4)
    assert torch.allclose(block(x), x + block.group(x), atol=1e-12)
    for m in block.modules():
        if hasattr(m, "bias") and isinstance(m.bias, torch.Tensor):
            with torch.no_grad():
                m.bias.zero_()
    assert torch.equal(block(torch.zeros(1, 8, 8, 4, dtype=torch.float64)), torch.zeros(1, 8, 8, 4, dtype=torch.float64))


def test_mssb_fused_equivalence():
    torch.manual_seed(4)
    block = MSSB(6, CFG, 2).eval()
    fused = fuse_module(block)
    x = rand_map(8, 8, 6, 5).float()
    assert torch.abs(block(x) - fused(x)).max() <= 1e-5
