"""Weight files and ``MCT1`` tensor files.

Weights: one UTF-8 header line ``MCTW key=value ...`` naming the architecture,
then the flat little-endian float32 parameter vector.

Tensors: magic ``MCT1``, u32 rank, rank x u32 dims, then little-endian float32
payload in row-major order.
"""

from __future__ import annotations

import struct
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from .denoiser import DenoiserConfig, ToyDenoiser
from .errors import FormatError

WEIGHTS_MAGIC = "MCTW"
TENSOR_MAGIC = b"MCT1"


def save_weights(model: ToyDenoiser, path: str | Path) -> None:
    flat = model.flat_weights().numpy().astype("<f4")
    parts = [WEIGHTS_MAGIC] + [f"{f.name}={getattr(model.cfg, f.name)}" for f in fields(DenoiserConfig)]
    parts.append(f"params={flat.size}")
    with open(path, "wb") as f:
        f.write((" ".join(parts) + "\n").encode("utf-8"))
        f.write(flat.tobytes())


def read_weights_header(path: str | Path) -> dict[str, int]:
    with open(path, "rb") as f:
        line = f.readline().decode("utf-8").split()
    if not line or line[0] != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: not a weights file")
    try:
        return {k: int(v) for k, v in (p.split("=", 1) for p in line[1:])}
    except ValueError:
        raise FormatError(f"{path}: malformed header") from None


def load_weights(path: str | Path) -> ToyDenoiser:
    with open(path, "rb") as f:
        f.readline()
        payload = f.read()
    header = read_weights_header(path)
    n = header.pop("params")
    if len(payload) != 4 * n:
        raise FormatError(f"{path}: header says {n} params, payload has {len(payload) // 4}")
    model = ToyDenoiser(DenoiserConfig(**header))
    model.load_flat_weights(torch.from_numpy(np.frombuffer(payload, dtype="<f4").copy()))
    model.eval()
    return model


def save_tensor(t, path: str | Path) -> None:
    arr = np.ascontiguousarray(torch.as_tensor(t).detach().cpu().numpy(), dtype="<f4")
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        f.write(arr.tobytes())


def load_tensor(path: str | Path) -> torch.Tensor:
    data = Path(path).read_bytes()
    if data[:4] != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    (rank,) = struct.unpack_from("<I", data, 4)
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    off = 8 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    if len(data) - off != 4 * count:
        raise FormatError(f"{path}: payload size does not match dims {dims}")
    arr = np.frombuffer(data, dtype="<f4", offset=off, count=count).reshape(dims)
    return torch.from_numpy(arr.copy())
