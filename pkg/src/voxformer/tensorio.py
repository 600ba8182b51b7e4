"""Named-tensor container used for checkpoints and per-view scene data.

Layout (little-endian): magic ``VFCK``, u32 version, u32 tensor count, then per
tensor u16 name length, UTF-8 name, u8 rank, u32 dims, f32 data.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np
import torch

from .errors import StructuralError

MAGIC = b"VFCK"
VERSION = 1


def write_tensors(tensors: Mapping[str, torch.Tensor | np.ndarray], fh: BinaryIO) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, len(tensors)))
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        raw = name.encode("utf-8")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensors(fh: BinaryIO) -> dict[str, torch.Tensor]:
    if fh.read(4) != MAGIC:
        raise StructuralError("not a VFCK tensor container")
    version, count = struct.unpack("<II", fh.read(8))
    if version != VERSION:
        raise StructuralError(f"unsupported container version {version}")
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", fh.read(2))
        name = fh.read(n).decode("utf-8")
        (rank,) = struct.unpack("<B", fh.read(1))
        shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(fh.read(4 * size), dtype="<f4").reshape(shape)
        out[name] = torch.from_numpy(data.astype(np.float32))
    return out


def save_tensors(tensors, path) -> None:
    with open(Path(path), "wb") as fh:
        write_tensors(tensors, fh)


def load_tensors(path) -> dict[str, torch.Tensor]:
    with open(Path(path), "rb") as fh:
        return read_tensors(fh)


def save_checkpoint(module: torch.nn.Module, path) -> None:
    save_tensors(module.state_dict(), path)


def load_checkpoint(module: torch.nn.Module, path) -> torch.nn.Module:
    state = load_tensors(path)
    own = module.state_dict()
    missing = sorted(set(own) - set(state))
    if missing:
        raise StructuralError(f"checkpoint lacks tensors: {missing[:5]}")
    module.load_state_dict({k: state[k].to(own[k].dtype).reshape(own[k].shape) for k in own})
    return module
