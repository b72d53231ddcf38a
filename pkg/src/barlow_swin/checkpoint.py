"""Versioned binary checkpoint archive.

Layout (all integers little-endian)::

    b"BSWN"                      magic
    u32  format version
    u8   mode tag                0 = encoder_only, 1 = full_model
    u32  epoch
    u32  config length, then that many bytes of UTF-8 "key=value\\n" lines
    u32  tensor count
    per tensor:
        u32  name length, UTF-8 name
        u32  rank
        u64  extent, repeated rank times
        u8   dtype tag           0 = float32, 1 = float64
        raw little-endian IEEE-754 payload, row-major

Optimizer moments are stored as ordinary tensors under ``optim.m.<name>``
and ``optim.v.<name>`` with the step count in the ``optim_step`` config key.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .exceptions import CheckpointError

MAGIC = b"BSWN"
FORMAT_VERSION = 1
MODES = {"encoder_only": 0, "full_model": 1}
_MODE_NAMES = {v: k for k, v in MODES.items()}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


@dataclass
class Checkpoint:
    mode: str
    tensors: Dict[str, np.ndarray]
    config: Dict[str, str] = field(default_factory=dict)
    epoch: int = 0
    optimizer: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise CheckpointError(f"unknown checkpoint mode {self.mode!r}")

    def subset(self, prefix: str) -> Dict[str, np.ndarray]:
        """Tensors under ``prefix.`` with the prefix kept."""
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype not in _DTYPE_TAGS:
        raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
    fh.write(_pack_str(name))
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    tag = _DTYPE_TAGS[arr.dtype]
    fh.write(struct.pack("<B", tag))
    fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    config_text = "".join(f"{k}={v}\n" for k, v in ckpt.config.items())
    tensors = dict(ckpt.tensors)
    for name, arr in ckpt.optimizer.items():
        tensors[f"optim.{name}"] = arr
    try:
        with path.open("wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", FORMAT_VERSION))
            fh.write(struct.pack("<B", MODES[ckpt.mode]))
            fh.write(struct.pack("<I", ckpt.epoch))
            fh.write(_pack_str(config_text))
            fh.write(struct.pack("<I", len(tensors)))
            for name, arr in tensors.items():
                _write_tensor(fh, name, arr)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from None
    return path


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    r = _Reader(path.read_bytes(), path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (mode_tag,) = r.unpack("<B")
    if mode_tag not in _MODE_NAMES:
        raise CheckpointError(f"{path}: unknown mode tag {mode_tag}")
    (epoch,) = r.unpack("<I")
    config = {}
    for line in r.string().splitlines():
        if line:
            key, _, value = line.partition("=")
            config[key] = value
    (count,) = r.unpack("<I")
    tensors, optimizer = {}, {}
    for _ in range(count):
        name = r.string()
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        (tag,) = r.unpack("<B")
        if tag not in _DTYPES:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype tag {tag}")
        dtype = _DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        if name.startswith("optim."):
            optimizer[name[len("optim."):]] = arr
        else:
            tensors[name] = arr
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return Checkpoint(_MODE_NAMES[mode_tag], tensors, config, epoch, optimizer)


def checkpoint_from_state(mode: str, state: Dict[str, np.ndarray], config: Optional[Dict[str, str]] = None,
                          epoch: int = 0, optimizer=None) -> Checkpoint:
    return Checkpoint(mode, {k: np.array(v, copy=True) for k, v in state.items()}, dict(config or {}), epoch,
                      dict(optimizer or {}))
