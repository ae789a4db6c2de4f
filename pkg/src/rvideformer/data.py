"""Procedural moving-pattern clips with synthetic sensor noise, stored as RVDF."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .raw import (
    NoiseModel,
    PackedFrame,
    RawClip,
    RawFrame,
    pack_bayer,
    read_rvdf,
    synth_noise,
    unpack_bayer,
    write_rvdf,
)

BLACK_LEVEL = 64
WHITE_LEVEL = 1023
KINDS = ("gradient", "checker", "discs")


@dataclass
class Clip:
    name: str
    clean: np.ndarray  # T×4×h×w normalized float32
    noisy: np.ndarray
    level: int


def _disc(h, w, cy, cx, r):
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r


def _canvas(rng: np.random.Generator, kind: str, h: int, w: int) -> np.ndarray:
    """Normalized ``4×h×w`` pattern with values inside [0.05, 0.9]."""
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    base = rng.uniform(0.15, 0.45, size=(4, 1, 1))
    gy, gx = rng.uniform(-0.25, 0.25, size=2)
    img = base + 0.5 * (gy * yy + gx * xx)[None]
    if kind == "checker":
        period = int(rng.integers(3, 9))
        amp = rng.uniform(0.1, 0.3, size=(4, 1, 1))
        iy, ix = np.mgrid[0:h, 0:w]
        img = img + amp * (((iy // period + ix // period) % 2) * 2 - 1)[None]
    elif kind == "gradient":
        freq = rng.uniform(1.0, 4.0)
        phase = rng.uniform(0, 2 * np.pi)
        img = img + 0.15 * np.sin(2 * np.pi * freq * (yy + xx) + phase)[None]
    elif kind == "discs":
        for _ in range(int(rng.integers(3, 7))):
            mask = _disc(h, w, rng.uniform(0, h), rng.uniform(0, w), rng.uniform(2, max(3, h / 4)))
            img = np.where(mask[None], rng.uniform(0.1, 0.85, size=(4, 1, 1)), img)
    return np.clip(img, 0.05, 0.9)


def render_clip(rng: np.random.Generator, kind: str, t: int, h: int, w: int):
    """Clean normalized packed clip ``T×4×h×w`` plus its per-frame integer flow.

    The background translates rigidly by (dx, dy) packed pixels per frame, so
    frame t+1 is frame t backward-warped by that flow. ``discs`` clips also
    carry an independently moving disc, which breaks rigidity.
    """
    dx, dy = (int(v) for v in rng.integers(-2, 3, size=2))
    ch, cw = h + abs(dy) * (t - 1), w + abs(dx) * (t - 1)
    canvas = _canvas(rng, kind, ch, cw)
    y0 = abs(dy) * (t - 1) if dy < 0 else 0
    x0 = abs(dx) * (t - 1) if dx < 0 else 0
    frames = np.stack([canvas[:, y0 + i * dy:y0 + i * dy + h, x0 + i * dx:x0 + i * dx + w] for i in range(t)])
    rigid = True
    if kind == "discs":
        rigid = False
        vy, vx = rng.uniform(-3, 3, size=2)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(2, max(3, h / 5))
        color = rng.uniform(0.1, 0.85, size=(4, 1, 1))
        for i in range(t):
            mask = _disc(h, w, cy + i * vy, cx + i * vx, r)
            frames[i] = np.where(mask[None], color, frames[i])
    return frames, (dx, dy), rigid


def _to_dn(x: np.ndarray) -> np.ndarray:
    return x * (WHITE_LEVEL - BLACK_LEVEL) + BLACK_LEVEL


def _from_dn(x: np.ndarray) -> np.ndarray:
    return (np.asarray(x, np.float64) - BLACK_LEVEL) / (WHITE_LEVEL - BLACK_LEVEL)


def _mosaic_clip(packed_dn: np.ndarray) -> np.ndarray:
    frames = [
        unpack_bayer(PackedFrame(f, BLACK_LEVEL, WHITE_LEVEL)).mosaic[None] for f in packed_dn
    ]
    return np.clip(np.rint(np.stack(frames)), 0, WHITE_LEVEL).astype(np.uint16)


def gen_synthetic_dataset(
    out_dir: Union[str, Path],
    n_clips: int = 40,
    t: int = 6,
    height: int = 64,
    width: int = 64,
    noise_model: Optional[NoiseModel] = None,
    seed: int = 0,
    level: Optional[int] = None,
) -> Path:
    """Write ``clean_XXXX.rvdf`` / ``noisy_XXXX.rvdf`` mosaic clips plus a manifest.

    ``height``×``width`` are raw mosaic extents. Each clip draws its noise level
    uniformly from 1..5 unless ``level`` pins it.
    """
    if height % 2 or width % 2:
        raise ValueError("raw extents must be even")
    noise_model = noise_model or NoiseModel.default()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(seed)
    entries = []
    for i, child in enumerate(root.spawn(n_clips)):
        rng = np.random.default_rng(child)
        kind = KINDS[int(rng.integers(len(KINDS)))]
        clip_level = int(rng.integers(1, 6)) if level is None else int(level)
        clean_norm, flow, rigid = render_clip(rng, kind, t, height // 2, width // 2)
        clean_dn = np.rint(_to_dn(clean_norm))
        noisy_dn = np.stack([
            synth_noise(PackedFrame(f, BLACK_LEVEL, WHITE_LEVEL), noise_model, clip_level,
                        int(rng.integers(2 ** 63))).channels
            for f in clean_dn
        ])
        name = f"{i:04d}"
        write_rvdf(out / f"clean_{name}.rvdf", RawClip(_mosaic_clip(clean_dn), BLACK_LEVEL, WHITE_LEVEL))
        write_rvdf(out / f"noisy_{name}.rvdf", RawClip(_mosaic_clip(noisy_dn), BLACK_LEVEL, WHITE_LEVEL))
        entries.append({"name": name, "kind": kind, "level": clip_level, "flow": list(flow), "rigid": rigid})
    manifest = {
        "seed": seed, "frames": t, "height": height, "width": width,
        "black_level": BLACK_LEVEL, "white_level": WHITE_LEVEL,
        "noise_model": {str(k): list(v) for k, v in sorted(noise_model.levels.items())},
        "clips": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_packed(path: Union[str, Path]) -> Tuple[np.ndarray, int, int]:
    """RVDF clip as a normalized packed ``T×4×h×w`` float32 array."""
    clip = read_rvdf(path)
    if clip.data.shape[1] == 4:
        packed = clip.data.astype(np.float64)
    else:
        packed = np.stack([
            pack_bayer(RawFrame(f[0], clip.pattern, clip.black_level, clip.white_level)).channels
            for f in clip.data
        ]).astype(np.float64)
    norm = (packed - clip.black_level) / (clip.white_level - clip.black_level)
    return norm.astype(np.float32), clip.black_level, clip.white_level


def load_dataset(data_dir: Union[str, Path]) -> List[Clip]:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    clips = []
    for entry in manifest["clips"]:
        name = entry["name"]
        clean, _, _ = load_packed(data_dir / f"clean_{name}.rvdf")
        noisy, _, _ = load_packed(data_dir / f"noisy_{name}.rvdf")
        clips.append(Clip(name, clean, noisy, entry["level"]))
    return clips


def split_dataset(clips: Sequence[Clip], val_fraction: float = 0.1) -> Tuple[List[Clip], List[Clip]]:
    """Last ``val_fraction`` of clips (at least one) are held out."""
    n_val = max(1, int(round(len(clips) * val_fraction)))
    return list(clips[:-n_val]), list(clips[-n_val:])
