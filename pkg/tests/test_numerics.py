import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rvideformer import numerics as nx


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def naive_conv(x, w, b):
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    p = k // 2
    xp = np.zeros((c_in, h + 2 * p, wd + 2 * p))
    xp[:, p:p + h, p:p + wd] = x
    out = np.zeros((c_out, h, wd))
    for o in range(c_out):
        for i in range(h):
            for j in range(wd):
                out[o, i, j] = b[o] + np.sum(w[o] * xp[:, i:i + k, j:j + k])
    return out


def test_matmul_identity_and_projector():
    m = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    assert torch.equal(nx.matmul(torch.eye(2), m), m)
    p = torch.tensor([[1.0, 0.0], [0.0, 0.0]])
    assert torch.equal(nx.matmul(p, torch.tensor([[5.0, 6.0], [7.0, 8.0]])), torch.tensor([[5.0, 6.0], [0.0, 0.0]]))


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    got = nx.matmul(torch.from_numpy(a), torch.from_numpy(b)).numpy()
    np.testing.assert_allclose(got, naive_matmul(a, b), atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        nx.matmul(torch.zeros(2, 3), torch.zeros(2, 3))


def test_softmax_examples():
    out = nx.softmax_rows(torch.zeros(1, 3, dtype=torch.float64))
    np.testing.assert_allclose(out.numpy(), [[1 / 3] * 3], atol=1e-15)
    for c in (-50.0, 0.0, 3.7, 1e3):
        out = nx.softmax_rows(torch.tensor([[c, c + math.log(2)]], dtype=torch.float64))
        np.testing.assert_allclose(out.numpy(), [[1 / 3, 2 / 3]], atol=1e-12)
    sat = nx.softmax_rows(torch.tensor([[-1e4, 0.0]]))
    assert torch.isfinite(sat).all()
    assert sat[0, 0] < 1e-30 and abs(float(sat[0, 1]) - 1) < 1e-7


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)), elements=st.floats(-30, 30)),
    st.floats(-100, 100),
)
def test_softmax_rows_stochastic_and_shift_invariant(a, shift):
    t = torch.from_numpy(a)
    s = nx.softmax_rows(t)
    assert (s >= 0).all()
    np.testing.assert_allclose(s.sum(-1).numpy(), 1.0, atol=1e-6)
    np.testing.assert_allclose(nx.softmax_rows(t + shift).numpy(), s.numpy(), atol=1e-6)


def test_conv2d_identity_and_constant():
    x = torch.randn(3, 5, 5)
    w = torch.eye(3).reshape(3, 3, 1, 1)
    assert torch.allclose(nx.conv2d(x, w), x)
    out = nx.conv2d(x, torch.zeros(2, 3, 3, 3), torch.tensor([1.5, -2.0]))
    assert torch.equal(out, torch.tensor([1.5, -2.0]).view(2, 1, 1).expand(2, 5, 5))


@pytest.mark.parametrize("k", [1, 3])
def test_conv2d_matches_nested_loops(k):
    rng = np.random.default_rng(k)
    x = rng.standard_normal((2, 5, 5))
    w = rng.standard_normal((3, 2, k, k))
    b = rng.standard_normal(3)
    got = nx.conv2d(torch.from_numpy(x), torch.from_numpy(w), torch.from_numpy(b)).numpy()
    np.testing.assert_allclose(got, naive_conv(x, w, b), atol=1e-12)


def test_conv2d_rejects_kernel():
    with pytest.raises(ValueError):
        nx.conv2d(torch.zeros(1, 5, 5), torch.zeros(1, 1, 5, 5))


def test_downsample_examples():
    ramp = torch.arange(16, dtype=torch.float64).reshape(1, 4, 4)
    np.testing.assert_allclose(nx.adaptive_avg_downsample(ramp, 2, 2)[0].numpy(), [[2.5, 4.5], [10.5, 12.5]])
    const = torch.full((2, 6, 9), 3.25)
    assert torch.allclose(nx.adaptive_avg_downsample(const, 4, 5), torch.full((2, 4, 5), 3.25))
    x = torch.randn(3, 4, 6)
    assert torch.equal(nx.adaptive_avg_downsample(x, 4, 6), x)
    with pytest.raises(ValueError):
        nx.adaptive_avg_downsample(x, 0, 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(0, 10_000))
def test_downsample_preserves_mean(oh, ow, fh, fw, seed):
    x = torch.from_numpy(np.random.default_rng(seed).standard_normal((2, oh * fh, ow * fw)))
    y = nx.adaptive_avg_downsample(x, oh, ow)
    np.testing.assert_allclose(y.mean().item(), x.mean().item(), atol=1e-12)


def test_layer_norm_gelu_dropout():
    x = torch.full((2, 6), 4.0)
    out = nx.layer_norm(x, torch.ones(6), torch.zeros(6))
    assert torch.allclose(out, torch.zeros(2, 6))
    assert float(nx.gelu(torch.tensor(0.0))) == 0.0
    y = torch.randn(5, 5)
    assert torch.equal(nx.dropout(y, 0.5, training=False), y)


def test_reshape_permute_roundtrip():
    x = torch.randn(2, 3, 4)
    assert torch.equal(nx.reshape(nx.reshape(x, (6, 4)), (2, 3, 4)), x)
    assert torch.equal(nx.permute(nx.permute(x, (2, 0, 1)), (1, 2, 0)), x)
    with pytest.raises(ValueError):
        nx.add(torch.zeros(2), torch.zeros(3))


def test_backward_linear_map_and_unused():
    w = torch.randn(3, 4, requires_grad=True)
    unused = torch.randn(2, requires_grad=True)
    x = torch.randn(4)
    grads = nx.backward((w @ x).sum(), {"W": w, "unused": unused})
    assert torch.allclose(grads["W"], x.expand(3, 4))
    assert torch.equal(grads["unused"], torch.zeros(2))


def test_backward_errors():
    w = torch.randn(3, requires_grad=True)
    with pytest.raises(ValueError):
        nx.backward(w * 2, {"w": w})
    with pytest.raises(ValueError):
        nx.backward(torch.tensor(1.0), {"w": w})


def test_backward_small_net_matches_finite_differences():
    g = torch.Generator().manual_seed(3)
    w1 = (torch.rand(5, 4, generator=g, dtype=torch.float64) * 2 - 1).requires_grad_()
    w2 = (torch.rand(1, 5, generator=g, dtype=torch.float64) * 2 - 1).requires_grad_()
    x = torch.rand(4, 3, generator=g, dtype=torch.float64) * 2 - 1

    def loss():
        return (w2 @ nx.gelu(w1 @ x)).sum()

    grads = nx.backward(loss(), {"w1": w1, "w2": w2})
    for name, p in (("w1", w1), ("w2", w2)):
        num = nx.central_difference(loss, p, 1e-4)
        assert nx.max_relative_error(grads[name], num) <= 1e-3


def test_backward_deterministic():
    def run():
        torch.manual_seed(11)
        w = torch.randn(4, 4, requires_grad=True)
        x = torch.randn(4, 4)
        return nx.backward(nx.softmax_rows(w @ x).pow(2).sum(), {"w": w})["w"]

    assert torch.equal(run(), run())


def test_check_finite():
    with pytest.raises(nx.NonFiniteError):
        nx.check_finite(torch.tensor([1.0, float("nan")]))
