"""Binary tensor file format used for images, model parameters, and logits.

Layout: magic b"FMT1", one byte rank, `rank` unsigned 32-bit little-endian
dims, then float32 little-endian payload in row-major order.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"FMT1"


class TensorFormatError(ValueError):
    """Raised when a tensor file is missing, truncated, or malformed."""


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    """Write `array` to `path` as an FMT1 tensor (cast to float32)."""
    arr = np.asarray(array, dtype="<f4", order="C")
    if arr.ndim > 255:
        raise TensorFormatError(f"rank {arr.ndim} exceeds format limit of 255")
    path = Path(path)
    header = MAGIC + struct.pack("<B", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    path.write_bytes(header + arr.tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    """Read an FMT1 tensor from `path`; returns a float32 array."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise TensorFormatError(f"cannot read tensor file {path}: {exc}") from exc
    if len(raw) < 5 or raw[:4] != MAGIC:
        raise TensorFormatError(f"{path}: missing FMT1 magic bytes")
    rank = raw[4]
    header_len = 5 + 4 * rank
    if len(raw) < header_len:
        raise TensorFormatError(f"{path}: truncated header")
    dims = struct.unpack(f"<{rank}I", raw[5:header_len])
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = raw[header_len:]
    if len(payload) != 4 * count:
        raise TensorFormatError(
            f"{path}: payload holds {len(payload)} bytes, expected {4 * count}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims)
    return arr.astype(np.float32, copy=True)
