"""Bayer raw handling: packing, brightness and color correction, warping,
neighbor sub-sampling, synthetic sensor noise, a fixed toy ISP, and the RVDF
clip container."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, NamedTuple, Tuple, Union

import numpy as np
import torch

PATTERNS = ("RGGB", "BGGR", "GRBG", "GBRG")

# (row, col) inside the 2x2 cell for R, Gr, Gb, B. Gr shares a row with R.
_CELL_OFFSETS: Dict[str, Tuple[Tuple[int, int], ...]] = {
    "RGGB": ((0, 0), (0, 1), (1, 0), (1, 1)),
    "BGGR": ((1, 1), (1, 0), (0, 1), (0, 0)),
    "GRBG": ((0, 1), (0, 0), (1, 1), (1, 0)),
    "GBRG": ((1, 0), (1, 1), (0, 0), (0, 1)),
}

ISP_GAINS = (2.0, 1.0, 1.6)
ISP_GAMMA = 1.0 / 2.2


@dataclass
class RawFrame:
    mosaic: np.ndarray
    pattern: str = "RGGB"
    black_level: float = 0.0
    white_level: float = 1.0

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown Bayer pattern {self.pattern!r}")
        if self.black_level >= self.white_level:
            raise ValueError("black level must be below white level")


@dataclass
class PackedFrame:
    """Four half-resolution planes in canonical (R, Gr, Gb, B) order."""

    channels: np.ndarray
    black_level: float = 0.0
    white_level: float = 1.0
    pattern: str = "RGGB"

    @property
    def extent(self) -> Tuple[int, int]:
        return self.channels.shape[-2], self.channels.shape[-1]


@dataclass
class NoiseModel:
    """Heteroscedastic Gaussian noise, variance ``a * signal + b`` in
    normalized units, keyed by synthetic ISO level 1..5."""

    levels: Dict[int, Tuple[float, float]] = field(default_factory=dict)

    @classmethod
    def default(cls) -> "NoiseModel":
        return cls({k: (0.01 * 2 ** (k - 1), 0.0001 * 2 ** (k - 1)) for k in range(1, 6)})

    def params(self, level: int) -> Tuple[float, float]:
        if level not in self.levels:
            raise ValueError(f"noise level {level} not in {sorted(self.levels)}")
        a, b = self.levels[level]
        if a < 0 or b < 0:
            raise ValueError("noise parameters must be nonnegative")
        return a, b


class GainEstimate(NamedTuple):
    gain: float
    overexposure_risk: bool


# --- packing -----------------------------------------------------------------


def pack_bayer(frame: RawFrame) -> PackedFrame:
    m = np.asarray(frame.mosaic)
    if m.ndim != 2 or m.shape[0] % 2 or m.shape[1] % 2:
        raise ValueError(f"mosaic extents must be even, got {m.shape}")
    planes = [m[r::2, c::2] for r, c in _CELL_OFFSETS[frame.pattern]]
    return PackedFrame(np.stack(planes), frame.black_level, frame.white_level, frame.pattern)


def unpack_bayer(packed: PackedFrame) -> RawFrame:
    ch = packed.channels
    h, w = ch.shape[-2:]
    m = np.empty((2 * h, 2 * w), dtype=ch.dtype)
    for plane, (r, c) in zip(ch, _CELL_OFFSETS[packed.pattern]):
        m[r::2, c::2] = plane
    return RawFrame(m, packed.pattern, packed.black_level, packed.white_level)


# --- intensity correction ----------------------------------------------------


def intensity_gain(noisy: RawFrame, clean: RawFrame) -> GainEstimate:
    """Brightness ratio between noisy and clean after black-level removal.

    A gain below 1 flags the over-exposure hazard: scaling clean down pulls
    clipped highlights under the white level.
    """
    if noisy.mosaic.shape != clean.mosaic.shape:
        raise ValueError("noisy and clean extents differ")
    num = np.sum(np.asarray(noisy.mosaic, np.float64) - noisy.black_level)
    den = np.sum(np.asarray(clean.mosaic, np.float64) - clean.black_level)
    if den <= 0:
        raise ValueError("clean frame has no signal above black level")
    g = float(num / den)
    return GainEstimate(g, g < 1.0)


def apply_gain(clean: RawFrame, gain: float) -> RawFrame:
    if gain <= 0:
        raise ValueError("gain must be positive")
    m = (np.asarray(clean.mosaic, np.float64) - clean.black_level) * gain + clean.black_level
    return replace(clean, mosaic=np.clip(m, 0.0, clean.white_level))


# --- color correction --------------------------------------------------------


def _channel_means(p: PackedFrame) -> np.ndarray:
    means = (np.asarray(p.channels, np.float64) - p.black_level).reshape(4, -1).mean(axis=1)
    if np.any(means <= 0):
        raise ValueError(f"channel means must be positive after black level, got {means}")
    return means


def channel_temperature(p: PackedFrame) -> np.ndarray:
    means = _channel_means(p)
    return means.sum() / (4.0 * means)


def color_correction_coeffs(measured: PackedFrame, target_k) -> np.ndarray:
    """Per-channel gains, red fixed at 1, that give ``measured`` the target
    channel temperatures."""
    k_hat = np.asarray(target_k, np.float64)
    if k_hat.shape != (4,) or np.any(k_hat <= 0):
        raise ValueError("target temperatures must be four positive values")
    if abs(np.sum(1.0 / (4.0 * k_hat)) - 1.0) > 1e-6:
        raise ValueError("target temperatures are inconsistent: sum of 1/(4K) must be 1")
    means = _channel_means(measured)
    return (k_hat[0] * means[0]) / (k_hat * means)


def apply_color_correction(p: PackedFrame, alpha) -> PackedFrame:
    a = np.asarray(alpha, np.float64).reshape(4, 1, 1)
    ch = (np.asarray(p.channels, np.float64) - p.black_level) * a + p.black_level
    return replace(p, channels=ch)


# --- warping -----------------------------------------------------------------


def warp_packed(p: PackedFrame, flow: np.ndarray) -> PackedFrame:
    """Backward bilinear warp: ``out[y, x] = in[y + dy, x + dx]``, edges clamped.

    ``flow`` is ``2×h×w`` holding (dx, dy) in packed-pixel units; the same
    displacement is applied to all four planes so the Bayer phase survives.
    """
    ch = np.asarray(p.channels, np.float64)
    h, w = ch.shape[-2:]
    flow = np.asarray(flow, np.float64)
    if flow.shape != (2, h, w):
        raise ValueError(f"flow shape {flow.shape} does not match packed extent {(h, w)}")
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    sx = np.clip(xx + flow[0], 0, w - 1)
    sy = np.clip(yy + flow[1], 0, h - 1)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sx - x0
    fy = sy - y0
    top = ch[:, y0, x0] * (1 - fx) + ch[:, y0, x1] * fx
    bot = ch[:, y1, x0] * (1 - fx) + ch[:, y1, x1] * fx
    return replace(p, channels=top * (1 - fy) + bot * fy)


# --- neighbor sub-sampling ---------------------------------------------------

# Ordered pairs of 4-adjacent positions in a 2x2 cell, positions numbered
# row-major (0 1 / 2 3).
_ADJACENT_PAIRS = np.array([(0, 1), (0, 2), (1, 0), (1, 3), (2, 0), (2, 3), (3, 1), (3, 2)])


def neighbor_subsample_indices(h: int, w: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Flat source indices into an ``h×w`` plane for the two sub-images.

    Each output pixel (i, j) reads from cell (i, j); the pair of positions is
    drawn uniformly from the eight ordered adjacent pairs.
    """
    if h % 2 or w % 2:
        raise ValueError(f"extents must be even, got {h}x{w}")
    rng = np.random.default_rng(seed)
    hh, hw = h // 2, w // 2
    choice = _ADJACENT_PAIRS[rng.integers(0, len(_ADJACENT_PAIRS), size=(hh, hw))]
    ci, cj = np.meshgrid(np.arange(hh), np.arange(hw), indexing="ij")
    base = (2 * ci) * w + 2 * cj

    def flat(pos):
        return base + (pos // 2) * w + (pos % 2)

    return flat(choice[..., 0]), flat(choice[..., 1])


def subsample(x, idx: np.ndarray):
    """Gather ``x[..., H, W]`` at flat plane indices ``idx`` (numpy or torch)."""
    h, w = x.shape[-2:]
    lead = x.shape[:-2]
    if isinstance(x, torch.Tensor):
        ix = torch.as_tensor(idx.reshape(-1), device=x.device)
        return x.reshape(*lead, h * w)[..., ix].reshape(*lead, *idx.shape)
    return x.reshape(*lead, h * w)[..., idx.reshape(-1)].reshape(*lead, *idx.shape)


def neighbor_subsample_pair(p: PackedFrame, seed: int) -> Tuple[PackedFrame, PackedFrame]:
    h, w = p.extent
    i1, i2 = neighbor_subsample_indices(h, w, seed)
    return replace(p, channels=subsample(p.channels, i1)), replace(p, channels=subsample(p.channels, i2))


# --- noise synthesis ---------------------------------------------------------


def synth_noise(clean: PackedFrame, model: NoiseModel, level: int, seed: int) -> PackedFrame:
    a, b = model.params(level)
    rng = np.random.default_rng(seed)
    span = clean.white_level - clean.black_level
    x = np.asarray(clean.channels, np.float64)
    signal = np.maximum((x - clean.black_level) / span, 0.0)
    std = np.sqrt(a * signal + b) * span
    noisy = x + rng.standard_normal(x.shape) * std
    return replace(clean, channels=np.clip(noisy, 0.0, clean.white_level))


# --- toy ISP -----------------------------------------------------------------


def toy_isp_tensor(x: torch.Tensor) -> torch.Tensor:
    """Normalized packed ``...×4×H×W`` to sRGB ``...×3×H×W`` in [0, 1]."""
    r = x[..., 0, :, :] * ISP_GAINS[0]
    g = (x[..., 1, :, :] + x[..., 2, :, :]) * (0.5 * ISP_GAINS[1])
    b = x[..., 3, :, :] * ISP_GAINS[2]
    rgb = torch.stack([r, g, b], dim=-3).clamp(0.0, 1.0)
    # pow is evaluated on a floored copy so the zero branch has a finite gradient
    return torch.where(rgb > 0, rgb.clamp_min(1e-12) ** ISP_GAMMA, torch.zeros_like(rgb))


def toy_isp(raw_out: PackedFrame) -> np.ndarray:
    span = raw_out.white_level - raw_out.black_level
    x = (torch.as_tensor(np.asarray(raw_out.channels, np.float64)) - raw_out.black_level) / span
    return toy_isp_tensor(x).numpy()


# --- RVDF container ----------------------------------------------------------

_RVDF_MAGIC = b"RVDF"
_RVDF_HEADER = struct.Struct("<4sBIIIIHHB")


@dataclass
class RawClip:
    """``T×C×H×W`` uint16 samples; C is 1 (mosaic) or 4 (packed)."""

    data: np.ndarray
    black_level: int
    white_level: int
    pattern: str = "RGGB"


def write_rvdf(path: Union[str, Path], clip: RawClip) -> None:
    data = np.asarray(clip.data)
    if data.ndim != 4 or data.shape[1] not in (1, 4):
        raise ValueError(f"clip must be T×C×H×W with C in (1, 4), got {data.shape}")
    t, c, h, w = data.shape
    header = _RVDF_HEADER.pack(
        _RVDF_MAGIC, 1, t, h, w, c, int(clip.black_level), int(clip.white_level), PATTERNS.index(clip.pattern)
    )
    payload = np.ascontiguousarray(data.astype("<u2")).tobytes()
    Path(path).write_bytes(header + payload)


def read_rvdf(path: Union[str, Path]) -> RawClip:
    buf = Path(path).read_bytes()
    magic, version, t, h, w, c, bl, wl, pat = _RVDF_HEADER.unpack_from(buf)
    if magic != _RVDF_MAGIC:
        raise ValueError(f"{path}: not an RVDF file")
    if version != 1:
        raise ValueError(f"{path}: unsupported RVDF version {version}")
    n = t * c * h * w
    body = buf[_RVDF_HEADER.size:]
    if len(body) != 2 * n:
        raise ValueError(f"{path}: expected {2 * n} sample bytes, found {len(body)}")
    data = np.frombuffer(body, dtype="<u2").reshape(t, c, h, w).astype(np.uint16)
    return RawClip(data, bl, wl, PATTERNS[pat])
