"""Binary parameter checkpoints.

Layout (all integers little-endian u32, floats little-endian f32):
    magic "RFCK" | version | entry count
    per entry: name length | UTF-8 name | rank | extents... | flat f32 data
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"RFCK"
VERSION = 1


def save_checkpoint(path: str | Path, params: dict[str, torch.Tensor]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(params)))
        for name, tensor in params.items():
            data = tensor.detach().cpu().to(torch.float32).contiguous().numpy()
            name_b = name.encode("utf-8")
            f.write(struct.pack("<I", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.astype("<f4").tobytes())


def load_checkpoint(path: str | Path, dtype: torch.dtype = torch.float32) -> dict[str, torch.Tensor]:
    path = Path(path)
    out: dict[str, torch.Tensor] = {}
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        version, count = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            n = int(np.prod(shape)) if shape else 1
            raw = f.read(4 * n)
            if len(raw) != 4 * n:
                raise ValueError(f"{path}: truncated data for entry '{name}'")
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            out[name] = torch.from_numpy(arr).to(dtype)
    return out
