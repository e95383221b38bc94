"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic        4 bytes   b"TACK"
    version      u32       FORMAT_VERSION
    float_width  u8        4 or 8 (bytes per parameter scalar)
    meta_len     u32       length of the UTF-8 JSON metadata blob
    meta         bytes     {"config": {...}, "step": ..., "seed": ..., "metrics": {...}}
    n_params     u32
    per parameter, in insertion order:
        name_len u32, name (UTF-8)
        ndim     u32, dims (u32 each)
        payload  product(dims) * float_width bytes, little-endian IEEE floats

Metadata is serialized with sorted keys so that load followed by save
reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import DataError

MAGIC = b"TACK"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict[str, Any] = field(default_factory=dict)
    step: int = 0
    seed: int = 0
    metrics: dict[str, Any] = field(default_factory=dict)

    @property
    def float_width(self) -> int:
        widths = {a.dtype.itemsize for a in self.params.values()}
        if len(widths) > 1:
            raise DataError(f"mixed float widths in checkpoint: {sorted(widths)}")
        return widths.pop() if widths else 8


def to_bytes(ckpt: Checkpoint) -> bytes:
    width = ckpt.float_width
    dtype = np.dtype("<f8") if width == 8 else np.dtype("<f4")
    meta = json.dumps(
        {"config": ckpt.config, "step": ckpt.step, "seed": ckpt.seed, "metrics": ckpt.metrics},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    parts = [MAGIC, struct.pack("<IBI", FORMAT_VERSION, width, len(meta)), meta]
    parts.append(struct.pack("<I", len(ckpt.params)))
    for name, arr in ckpt.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return b"".join(parts)


def from_bytes(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise DataError("not a checkpoint file (bad magic)")
    try:
        return _decode(buf)
    except (struct.error, ValueError, UnicodeDecodeError) as err:
        raise DataError(f"corrupt checkpoint: {err}") from err


def _decode(buf: bytes) -> Checkpoint:
    pos = 4
    version, width, meta_len = struct.unpack_from("<IBI", buf, pos)
    pos += struct.calcsize("<IBI")
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    if width not in (4, 8):
        raise DataError(f"unsupported float width {width}")
    dtype = np.dtype("<f8") if width == 8 else np.dtype("<f4")
    meta = json.loads(buf[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        nbytes = int(np.prod(shape, dtype=np.int64)) * width
        arr = np.frombuffer(buf, dtype=dtype, count=nbytes // width, offset=pos).reshape(shape)
        params[name] = arr.astype(dtype.newbyteorder("="), copy=True)
        pos += nbytes
    if pos != len(buf):
        raise DataError(f"trailing bytes in checkpoint ({len(buf) - pos})")
    return Checkpoint(params, meta.get("config", {}), meta.get("step", 0), meta.get("seed", 0), meta.get("metrics", {}))


def save(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
