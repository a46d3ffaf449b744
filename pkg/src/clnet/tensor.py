"""Dense planes x rows x cols feature maps and the primitives built on them.

A feature map is a plain float64 ``numpy.ndarray`` of shape
``(planes, rows, cols)`` in C order (plane-major, then row-major).  Most
layer operations also accept a leading batch axis, ``(n, planes, rows,
cols)``, and treat each sample independently.
"""
from __future__ import annotations

import functools
import struct
from pathlib import Path
from typing import BinaryIO, NamedTuple

import numpy as np

from .errors import FormatError

TENSOR_MAGIC = b"CLT1"
_DIMS = struct.Struct("<III")


def as_tensor3(x, *, name: str = "x") -> np.ndarray:
    """Return ``x`` as a C-contiguous float64 array of shape (planes, rows, cols)."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"{name} must be a 3-D (planes, rows, cols) array, got shape {arr.shape}")
    return arr


def as_batch(x, *, name: str = "x") -> tuple[np.ndarray, bool]:
    """Promote a single map to a batch of one.

    Returns ``(batch, was_single)`` so callers can undo the promotion.
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 3:
        return arr[None], True
    if arr.ndim == 4:
        return arr, False
    raise ValueError(f"{name} must have shape (planes, rows, cols) or (n, planes, rows, cols), got {arr.shape}")


@functools.lru_cache(maxsize=64)
def _gaussian(size: int, sigma: float) -> np.ndarray:
    half = size // 2
    p = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(p[:, None] ** 2 + p[None, :] ** 2) / (2.0 * sigma * sigma))
    g /= g.sum()
    g.setflags(write=False)
    return g


def make_gaussian_kernel(size: int, sigma: float | None = None) -> np.ndarray:
    """Sampled 2-D Gaussian on a ``size`` x ``size`` grid, renormalized to unit sum.

    When ``sigma`` is omitted it defaults to ``(size - 1) / 4``.  The returned
    array is read-only and shared between callers.
    """
    if int(size) != size or size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be an odd integer >= 1, got {size!r}")
    size = int(size)
    if sigma is None:
        sigma = (size - 1) / 4.0 if size > 1 else 1.0
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma!r}")
    return _gaussian(size, float(sigma))


def uniform_kernel(size: int) -> np.ndarray:
    k = np.full((size, size), 1.0 / (size * size))
    k.setflags(write=False)
    return k


def tensor_patch(x: np.ndarray, row: int, col: int, h: int, w: int) -> np.ndarray:
    """Copy of the ``h`` x ``w`` window at (row, col) across all planes."""
    x = as_tensor3(x)
    _, rows, cols = x.shape
    if h < 1 or w < 1 or row < 0 or col < 0 or row + h > rows or col + w > cols:
        raise IndexError(f"patch ({row}, {col}, {h}x{w}) outside tensor of {rows}x{cols}")
    return x[:, row:row + h, col:col + w].copy()


class TensorStats(NamedTuple):
    mean: float
    std: float
    min: float
    max: float


def tensor_stats(x: np.ndarray) -> TensorStats:
    """Population mean, std, min and max over every component."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("tensor_stats of an empty tensor")
    return TensorStats(float(arr.mean()), float(arr.std()), float(arr.min()), float(arr.max()))


# -- serialization ---------------------------------------------------------

def write_tensor(fh: BinaryIO, x: np.ndarray) -> None:
    x = as_tensor3(x)
    fh.write(TENSOR_MAGIC)
    fh.write(_DIMS.pack(*x.shape))
    fh.write(x.astype("<f8", copy=False).tobytes())


def read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated input while reading {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = read_exact(fh, 4, "tensor magic")
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}, expected {TENSOR_MAGIC!r}")
    planes, rows, cols = _DIMS.unpack(read_exact(fh, _DIMS.size, "tensor dims"))
    count = planes * rows * cols
    data = read_exact(fh, 8 * count, "tensor data")
    return np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(planes, rows, cols)


def save_tensor(path: str | Path, x: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, x)


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        x = read_tensor(fh)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after tensor")
    return x
