"""Slow reference implementations built from explicit loops (float64 numpy).

Maps are ``H×W×C``; a window is addressed by its grid coordinates (a, b).
"""

import math

import numpy as np


def proj_arrays(proj):
    return tuple(p.detach().double().numpy() for p in (proj.P_Q, proj.P_K, proj.P_V))


def dense_attention(q_tokens, kv_tokens, pq, pk, pv, heads, allowed=None):
    """Returns (output N×D, attention heads×N×M)."""
    q = q_tokens @ pq
    k = kv_tokens @ pk
    v = kv_tokens @ pv
    n, d = q.shape
    m = k.shape[0]
    hd = d // heads
    out = np.zeros((n, d))
    attn = np.zeros((heads, n, m))
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        for i in range(n):
            keys = [j for j in range(m) if allowed is None or allowed[i, j]]
            s = np.array([np.dot(q[i, sl], k[j, sl]) / math.sqrt(hd) for j in keys])
            e = np.exp(s - s.max())
            p = e / e.sum()
            for pj, j in zip(p, keys):
                attn[h, i, j] = pj
                out[i, sl] += pj * v[j, sl]
    return out, attn


def window_tokens(fmap, a, b, window):
    wh, ww = window
    return np.array([fmap[a * wh + u, b * ww + v] for u in range(wh) for v in range(ww)])


def pooled_tokens(fmap, a, b, window):
    wh, ww = window
    toks = []
    for u in range(wh // 2):
        for v in range(ww // 2):
            y, x = a * wh + 2 * u, b * ww + 2 * v
            toks.append(fmap[y:y + 2, x:x + 2].reshape(4, -1).mean(axis=0))
    return np.array(toks)


def global_pool_tokens(fmap, window):
    h, w, _ = fmap.shape
    wh, ww = window
    sh, sw = h // wh, w // ww
    return np.array([fmap[u * sh:(u + 1) * sh, v * sw:(v + 1) * sw].reshape(sh * sw, -1).mean(axis=0)
                     for u in range(wh) for v in range(ww)])


def neighbor_pool_tokens(fmap, a, b, window, f):
    h, w, c = fmap.shape
    wh, ww = window
    ph, pw = (f - 1) * wh // 2, (f - 1) * ww // 2
    toks = []
    for u in range(wh):
        for v in range(ww):
            acc = np.zeros(c)
            for dy in range(f):
                for dx in range(f):
                    r = a * wh - ph + f * u + dy
                    s = b * ww - pw + f * v + dx
                    if 0 <= r < h and 0 <= s < w:
                        acc += fmap[r, s]
            toks.append(acc / (f * f))
    return np.array(toks)


def neighbor_coverage(h, w, a, b, window, f):
    """Set of map pixels that feed the pooled neighbourhood of window (a, b)."""
    wh, ww = window
    ph, pw = (f - 1) * wh // 2, (f - 1) * ww // 2
    return {(r, s) for r in range(a * wh - ph, a * wh - ph + f * wh)
            for s in range(b * ww - pw, b * ww - pw + f * ww) if 0 <= r < h and 0 <= s < w}


def wrap_flags(h, w, shift):
    """For a map rolled by ``-shift``: (row wrapped, col wrapped) per position."""
    sh, sw = shift
    return [[((i + sh) >= h, (j + sw) >= w) for j in range(w)] for i in range(h)]


def shifted_allowed(h, w, a, b, window, shift):
    """Mask of allowed query/key pairs inside window (a, b) of the rolled map:
    pixels that were contiguous before the roll may attend to each other."""
    flags = wrap_flags(h, w, shift)
    wh, ww = window
    pos = [(a * wh + u, b * ww + v) for u in range(wh) for v in range(ww)]
    lab = [flags[y][x] for y, x in pos]
    return np.array([[li == lj for lj in lab] for li in lab])
