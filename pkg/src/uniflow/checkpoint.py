"""Single-file checkpoint container.

Layout (little-endian)::

    b"UFLW" | u32 version | u64 len + config text (UTF-8)
    | u64 array count
    | per array: u64 len + name, u8 dtype tag, u8 rank, rank x u64 dims, raw C-order payload
    | u64 len + rng state blob

The training step travels as the rank-0 int64 array ``trainer.step``.
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from .config import RunConfig, dump_config, parse_config

MAGIC = b"UFLW"
VERSION = 1
STEP_KEY = "trainer.step"

_DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
    3: np.dtype("<i4"),
    4: np.dtype("u1"),
    5: np.dtype("bool"),
    6: np.dtype("<f2"),
}
_TAGS = {dt: tag for tag, dt in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    named_arrays: dict[str, np.ndarray]
    step: int = 0
    rng_state: bytes = b""
    version: int = VERSION
    path: Path | None = field(default=None, compare=False)


def _write_blob(f: BinaryIO, data: bytes) -> None:
    f.write(struct.pack("<Q", len(data)))
    f.write(data)


def _read_exact(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError("checkpoint file is truncated")
    return data


def _read_blob(f: BinaryIO) -> bytes:
    (n,) = struct.unpack("<Q", _read_exact(f, 8))
    return _read_exact(f, n)


def encode(ckpt: Checkpoint) -> bytes:
    arrays = dict(ckpt.named_arrays)
    arrays[STEP_KEY] = np.asarray(ckpt.step, dtype=np.int64)
    f = io.BytesIO()
    f.write(MAGIC)
    f.write(struct.pack("<I", ckpt.version))
    _write_blob(f, dump_config(ckpt.config).encode("utf-8"))
    f.write(struct.pack("<Q", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in _TAGS:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        _write_blob(f, name.encode("utf-8"))
        f.write(struct.pack("<BB", _TAGS[dt], arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    _write_blob(f, ckpt.rng_state)
    return f.getvalue()


def decode(data: bytes) -> Checkpoint:
    f = io.BytesIO(data)
    if _read_exact(f, 4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", _read_exact(f, 4))
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (reader is version {VERSION})")
    config = parse_config(_read_blob(f).decode("utf-8"))
    (count,) = struct.unpack("<Q", _read_exact(f, 8))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = _read_blob(f).decode("utf-8")
        tag, rank = struct.unpack("<BB", _read_exact(f, 2))
        if tag not in _DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for {name!r}")
        dims = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank))
        dt = _DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        arrays[name] = np.frombuffer(_read_exact(f, nbytes), dtype=dt).reshape(dims).copy()
    rng_state = _read_blob(f)
    if f.read(1):
        raise CheckpointError("trailing bytes after checkpoint payload")
    if STEP_KEY not in arrays:
        raise CheckpointError(f"checkpoint is missing {STEP_KEY!r}")
    step = int(arrays.pop(STEP_KEY))
    return Checkpoint(config, arrays, step, rng_state, version)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    """Write atomically: a crash mid-write leaves any existing file at ``path`` untouched."""
    path = Path(path)
    payload = encode(ckpt)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    ckpt = decode(path.read_bytes())
    ckpt.path = path
    return ckpt


def require(arrays: Mapping[str, np.ndarray], names) -> None:
    missing = [n for n in names if n not in arrays]
    if missing:
        raise CheckpointError(f"checkpoint is missing parameter(s): {', '.join(missing[:5])}"
                              + (" ..." if len(missing) > 5 else ""))
