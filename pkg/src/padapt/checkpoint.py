"""Flat binary checkpoint format for named float64 tensors.

Layout (all integers little-endian):

    magic   4 bytes  b"PADT"
    version u32      currently 1
    count   u32      number of named tensors
    then per tensor:
        name_len u32, name bytes (UTF-8)
        rank     u32
        extents  rank x u64
        data     prod(extents) x f64
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PADT"
VERSION = 1


class CheckpointError(RuntimeError):
    """Malformed or incompatible checkpoint file."""


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=np.float64)
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a tensor checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    offset = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            extents = struct.unpack_from(f"<{rank}Q", blob, offset)
            offset += 8 * rank
            n = int(np.prod(extents)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).copy()
            offset += 8 * n
            out[name] = arr.reshape(extents)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint {path}") from exc
    if offset != len(blob):
        raise CheckpointError(f"trailing bytes in checkpoint {path}")
    return out
