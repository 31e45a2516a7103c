"""Binary checkpoint files.

Layout (little-endian)::

    b"PDTC" | u32 version | u64 json_len | canonical JSON metadata
    | u32 n_tensors | per tensor: u16 name_len, name, u8 dtype, u8 ndim,
      u32 dims..., raw payload | u32 CRC32 of everything before it
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from .errors import DataError, FormatVersionError, IntegrityError

MAGIC = b"PDTC"
VERSION = 1

_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3}


@dataclass
class Checkpoint:
    """Everything needed to rebuild a model and resume its optimizer."""

    config: Dict[str, Any]
    params: Dict[str, np.ndarray]
    phase: str = "pretrain"
    epoch: int = 0
    step: int = 0
    adam_t: int = 0
    adam_m: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: Dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: Optional[Dict[str, Any]] = None
    best_val: Optional[float] = None
    best_epoch: Optional[int] = None
    best_params: Dict[str, np.ndarray] = field(default_factory=dict)
    extra: Dict[str, Any] = field(default_factory=dict)
    version: int = VERSION

    def metadata(self) -> Dict[str, Any]:
        return {
            "config": self.config,
            "phase": self.phase,
            "epoch": self.epoch,
            "step": self.step,
            "adam_t": self.adam_t,
            "rng_state": self.rng_state,
            "best_val": self.best_val,
            "best_epoch": self.best_epoch,
            "extra": self.extra,
        }

    def tensors(self) -> Dict[str, np.ndarray]:
        out = {}
        for prefix, group in (("param/", self.params), ("adam.m/", self.adam_m),
                              ("adam.v/", self.adam_v), ("best/", self.best_params)):
            for k in sorted(group):
                out[prefix + k] = group[k]
        return out


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False)


def to_bytes(ckpt: Checkpoint) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", ckpt.version)
    meta = canonical_json(ckpt.metadata()).encode("ascii")
    out += struct.pack("<Q", len(meta)) + meta
    tensors = ckpt.tensors()
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise DataError(f"cannot store tensor {name} of dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<BB", code, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


def from_bytes(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise IntegrityError(f"{source}: not a PDTC checkpoint")
    (stored_crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != stored_crc:
        raise IntegrityError(f"{source}: checksum mismatch (file corrupted or truncated)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise FormatVersionError(
            f"{source}: checkpoint format version {version} is not supported (expected version {VERSION})"
        )
    try:
        (n,) = struct.unpack_from("<Q", buf, 8)
        off = 16
        meta = json.loads(buf[off:off + n].decode("ascii"))
        off += n
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + ln].decode("utf-8")
            off += ln
            code, ndim = struct.unpack_from("<BB", buf, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            dt = _DTYPES[code]
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(buf, dtype=dt, count=size, offset=off).reshape(shape)
            tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
            off += size * dt.itemsize
        if off != len(buf) - 4:
            raise IntegrityError(f"{source}: trailing bytes after tensor directory")
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        raise IntegrityError(f"{source}: malformed checkpoint body") from exc

    groups: Dict[str, Dict[str, np.ndarray]] = {"param": {}, "adam.m": {}, "adam.v": {}, "best": {}}
    for name, arr in tensors.items():
        prefix, _, key = name.partition("/")
        groups[prefix][key] = arr
    return Checkpoint(
        config=meta["config"],
        params=groups["param"],
        phase=meta["phase"],
        epoch=meta["epoch"],
        step=meta["step"],
        adam_t=meta["adam_t"],
        adam_m=groups["adam.m"],
        adam_v=groups["adam.v"],
        rng_state=meta["rng_state"],
        best_val=meta["best_val"],
        best_epoch=meta["best_epoch"],
        best_params=groups["best"],
        extra=meta.get("extra", {}),
        version=version,
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    return from_bytes(path.read_bytes(), str(path))
