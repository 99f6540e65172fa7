"""Binary masks: dilation, attention-resolution pyramids, cross-attention extraction and PNG I/O.

Masks are boolean numpy arrays of shape ``[height, width]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .errors import FormatError, InvalidArgument
from .scenes import region_mask, segment_synthetic  # noqa: F401  (re-exported)

KERNEL_3X3 = np.ones((3, 3), dtype=bool)


def as_mask(m) -> np.ndarray:
    arr = np.asarray(m)
    if arr.ndim != 2 or 0 in arr.shape:
        raise InvalidArgument(f"mask must be a non-empty 2-D array, got shape {arr.shape}")
    if arr.dtype != bool:
        if not np.isin(arr, (0, 1)).all():
            raise InvalidArgument("mask values must be 0 or 1")
        arr = arr.astype(bool)
    return arr


def dilate(mask, iterations: int = 1) -> np.ndarray:
    """Binary dilation by a 3x3 square, ``iterations`` times, clipped at the borders."""
    m = as_mask(mask)
    if iterations < 0:
        raise InvalidArgument("iterations must be >= 0")
    if iterations == 0:  # scipy treats 0 as "until convergence"
        return m.copy()
    return ndimage.binary_dilation(m, structure=KERNEL_3X3, iterations=iterations)


def downsample_max(mask, height: int, width: int) -> np.ndarray:
    """Max-pool to ``(height, width)``; cells covering fractional windows take any overlapped pixel."""
    m = as_mask(mask)
    H, W = m.shape
    if height > H or width > W or height < 1 or width < 1:
        raise InvalidArgument(f"cannot downsample {H}x{W} to {height}x{width}")
    if H % height == 0 and W % width == 0:
        return m.reshape(height, H // height, width, W // width).any(axis=(1, 3))
    out = np.zeros((height, width), dtype=bool)
    for i in range(height):
        r0, r1 = (i * H) // height, -((-(i + 1) * H) // height)
        for j in range(width):
            c0, c1 = (j * W) // width, -((-(j + 1) * W) // width)
            out[i, j] = m[r0:r1, c0:c1].any()
    return out


@dataclass
class MaskPyramid:
    """A base mask and its max-pooled copies keyed by attention resolution ``(h, w)``."""

    base: np.ndarray
    levels: dict[tuple[int, int], np.ndarray]

    def __getitem__(self, res: tuple[int, int]) -> np.ndarray:
        try:
            return self.levels[tuple(res)]
        except KeyError:
            raise KeyError(f"mask pyramid has no level {tuple(res)}") from None

    def __contains__(self, res) -> bool:
        return tuple(res) in self.levels

    def flat(self, res: tuple[int, int], dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self[res].reshape(-1), dtype=dtype)

    @classmethod
    def constant(cls, value: bool, base_shape: tuple[int, int], resolutions: Iterable[tuple[int, int]]):
        base = np.full(base_shape, bool(value))
        return build_pyramid(base, resolutions)


def build_pyramid(mask, resolutions: Iterable[tuple[int, int]]) -> MaskPyramid:
    m = as_mask(mask)
    levels = {}
    for h, w in resolutions:
        levels[(h, w)] = m.copy() if (h, w) == m.shape else downsample_max(m, h, w)
    return MaskPyramid(m, levels)


def extract_cross_attention_mask(
    maps: Mapping[int, torch.Tensor],
    token_index: int,
    threshold: float = 0.5,
    layers: Optional[Sequence[int]] = None,
    resolution: Optional[tuple[int, int]] = None,
    prompt_length: Optional[int] = None,
) -> np.ndarray:
    """Binary mask from one token's cross-attention, averaged over heads and layers.

    ``maps`` holds per-layer probabilities ``[heads, pixels, tokens]`` for a single
    branch. Only layers at ``resolution`` are used (default: the finest one among
    ``layers``). The average is min-max normalised and thresholded; a flat map
    gives an empty mask.
    """
    if layers is None:
        layers = sorted(maps)
    if not layers:
        raise InvalidArgument("no cross-attention layers to average")
    sel = {l: maps[l] for l in layers}
    n_tokens = next(iter(sel.values())).shape[-1]
    limit = n_tokens if prompt_length is None else min(prompt_length, n_tokens)
    if not 0 <= token_index < limit:
        raise InvalidArgument(f"token index {token_index} outside prompt of length {limit}")
    side = {l: int(round(np.sqrt(m.shape[-2]))) for l, m in sel.items()}
    if resolution is None:
        s = max(side.values())
        resolution = (s, s)
    h, w = resolution
    use = [m for l, m in sel.items() if m.shape[-2] == h * w]
    if not use:
        raise InvalidArgument(f"no layer at resolution {resolution}")
    avg = torch.stack([m[..., token_index].to(torch.float64).mean(dim=0) for m in use]).mean(dim=0)
    avg = avg.reshape(h, w).cpu().numpy()
    lo, hi = avg.min(), avg.max()
    if hi == lo:
        return np.zeros((h, w), dtype=bool)
    return (avg - lo) / (hi - lo) >= threshold


def upsample_nearest(mask, height: int, width: int) -> np.ndarray:
    m = as_mask(mask)
    H, W = m.shape
    rows = (np.arange(height) * H) // height
    cols = (np.arange(width) * W) // width
    return m[rows][:, cols]


# --- file I/O -----------------------------------------------------------------------------

def save_mask(mask, path: str | Path) -> None:
    m = as_mask(mask)
    Image.fromarray(m.astype(np.uint8) * 255, mode="L").save(path)


def load_mask(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    bad = ~np.isin(arr, (0, 255))
    if bad.any():
        v = int(arr[bad][0])
        raise FormatError(f"{path}: mask pixel value {v} is neither 0 nor 255")
    return arr == 255


def save_image(img: np.ndarray, path: str | Path) -> None:
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_image(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB")).copy()


def load_region(path: str | Path, height: int, width: int) -> np.ndarray:
    """Region file ``x0 y0 x1 y1`` (inclusive pixel box) -> filled rectangle mask."""
    parts = Path(path).read_text().split()
    if len(parts) != 4:
        raise FormatError(f"{path}: expected 'x0 y0 x1 y1', got {' '.join(parts)!r}")
    try:
        box = tuple(int(p) for p in parts)
    except ValueError:
        raise FormatError(f"{path}: region coordinates must be integers") from None
    return region_mask(box, height, width)
