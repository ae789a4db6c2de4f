"""Run configuration and the flat ``key=value`` config file format."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional, Tuple, Union

MODES = ("train-sup", "train-unsup", "eval", "fuse", "gradcheck", "gen")


@dataclass(frozen=True)
class RunConfig:
    mode: str = "train-sup"
    preset: str = "micro"
    epochs: int = 200  # optimizer steps; one patch per step
    lr: float = 1e-4
    lr_drop_at: Tuple[float, float] = (2 / 6, 5 / 6)
    lr_drop_to: Tuple[float, float] = (0.5, 0.2)  # fractions of the starting rate
    batch: int = 1
    patch: int = 64  # raw mosaic pixels; packed patch is half
    frames: int = 6
    seed: int = 0
    data: str = "data"
    out: str = "runs"
    noise_level: int = 3
    n_clips: int = 40
    height: int = 64
    width: int = 64
    log_every: int = 50
    beta1: float = 0.5
    spatial_branches: bool = True
    temporal_branches: bool = True
    fused: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        a, b = self.lr_drop_at
        if not 0 < a < b < 1:
            raise ValueError(f"learning-rate drop fractions must be increasing in (0, 1): {self.lr_drop_at}")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.batch != 1:
            raise ValueError("only batch size 1 is supported")

    def lr_at(self, step: int) -> float:
        frac = step / self.epochs if self.epochs else 0.0
        if frac < self.lr_drop_at[0]:
            return self.lr
        if frac < self.lr_drop_at[1]:
            return self.lr * self.lr_drop_to[0]
        return self.lr * self.lr_drop_to[1]


def _coerce(value: str, default):
    if isinstance(default, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        return tuple(float(v) for v in value.split(","))
    return value.strip()


def parse_config_text(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    base = base or RunConfig()
    known = {f.name: getattr(base, f.name) for f in fields(RunConfig)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        updates[key] = _coerce(value, known[key])
    return replace(base, **updates)


def load_config(path: Union[str, Path], base: Optional[RunConfig] = None) -> RunConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), base)
