"""Named parameter collections and the RVPS checkpoint format.

RVPS layout (little-endian): magic ``RVPS``, u8 version (1), u32 entry count;
per entry sorted by name: u16 name length, UTF-8 name, u8 rank, rank x u32
extents, float32 values. A u64 FNV-1a checksum of every preceding byte ends
the file. A JSON manifest next to the blob records the model configuration.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Iterator, Mapping, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

MAGIC = b"RVPS"
VERSION = 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


class ChecksumError(ValueError):
    pass


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


class ParamStore(Mapping[str, np.ndarray]):
    """Immutable-by-convention mapping of parameter name -> float32 array."""

    def __init__(self, entries: Optional[Mapping[str, np.ndarray]] = None):
        self._entries: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name in sorted(entries or {}):
            self._entries[name] = np.ascontiguousarray(np.asarray(entries[name], dtype=np.float32))

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def num_values(self) -> int:
        return int(sum(v.size for v in self._entries.values()))

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParamStore":
        return cls({k: v.detach().cpu().float().numpy() for k, v in module.state_dict().items()})

    def load_into(self, module: nn.Module) -> nn.Module:
        own = module.state_dict()
        missing = set(own) - set(self._entries)
        extra = set(self._entries) - set(own)
        if missing or extra:
            raise KeyError(f"store does not match module: missing {sorted(missing)[:5]}, extra {sorted(extra)[:5]}")
        for name, value in self._entries.items():
            if tuple(own[name].shape) != value.shape:
                raise ValueError(f"{name}: store shape {value.shape} vs module {tuple(own[name].shape)}")
        module.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self._entries.items()})
        return module

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<BI", VERSION, len(self._entries))]
        for name, value in self._entries.items():
            raw = name.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)))
            parts.append(raw)
            parts.append(struct.pack("<B", value.ndim))
            parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
            parts.append(value.astype("<f4").tobytes())
        blob = b"".join(parts)
        return blob + struct.pack("<Q", fnv1a64(blob))

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ParamStore":
        if buf[:4] != MAGIC:
            raise ValueError("not an RVPS blob")
        blob, (checksum,) = buf[:-8], struct.unpack("<Q", buf[-8:])
        if fnv1a64(blob) != checksum:
            raise ChecksumError("RVPS checksum mismatch")
        version, count = struct.unpack_from("<BI", blob, 4)
        if version != VERSION:
            raise ValueError(f"unsupported RVPS version {version}")
        off = 9
        entries: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            entries[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
            off += 4 * n
        if off != len(blob):
            raise ValueError("trailing bytes in RVPS blob")
        return cls(entries)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ParamStore":
        return cls.from_bytes(Path(path).read_bytes())

    def equal(self, other: "ParamStore") -> bool:
        return list(self) == list(other) and all(
            self[k].shape == other[k].shape and self[k].tobytes() == other[k].tobytes() for k in self
        )


def manifest_path(path: Union[str, Path]) -> Path:
    return Path(path).with_suffix(".json")


def save_checkpoint(path: Union[str, Path], store: ParamStore, manifest: dict) -> None:
    store.save(path)
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path: Union[str, Path]) -> Tuple[ParamStore, dict]:
    return ParamStore.load(path), json.loads(manifest_path(path).read_text())
