"""Dataset containers, loaders, preprocessing and synthetic generators."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .layers import DEFAULT_EPSILON, contrastive_norm
from .tensor import load_tensor, make_gaussian_kernel, read_exact, read_tensor, write_tensor

DATASET_MAGIC = b"CLD1"
CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass(eq=False)
class LabeledDataset:
    images: np.ndarray  # (n, planes, rows, cols)
    labels: np.ndarray
    classes: int
    name: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) == 0:
            self.images = self.images.reshape((0,) + (self.images.shape[1:] if self.images.ndim == 4 else (0, 0, 0)))
        if self.images.ndim != 4:
            raise ValueError(f"images must be (n, planes, rows, cols), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels must lie in 0..{self.classes - 1}")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, name: str | None = None) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx], self.classes, name or self.name)

    def same_as(self, other: "LabeledDataset") -> bool:
        return (self.classes == other.classes and len(self) == len(other)
                and np.array_equal(self.labels, other.labels)
                and (len(self) == 0 or np.array_equal(self.images, other.images)))


# -- CIFAR-10 ---------------------------------------------------------------------

def load_cifar10_binary(path) -> LabeledDataset:
    """Read a CIFAR-10 binary batch: 1 label byte + 3072 channel-major pixel bytes per record."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        raise FormatError(f"{path}: length {raw.size} is not a multiple of {CIFAR_RECORD}-byte records")
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"{path}: label byte {labels[bad[0]]} > 9 at offset {bad[0] * CIFAR_RECORD}")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return LabeledDataset(images, labels, 10, Path(path).stem)


def write_cifar10_binary(path, ds: LabeledDataset) -> None:
    """Inverse of :func:`load_cifar10_binary` for [0,1] images (used for fixtures)."""
    if ds.images.shape[1:] != (3, 32, 32):
        raise ValueError("CIFAR records hold 3x32x32 images")
    pix = np.clip(np.rint(ds.images * 255.0), 0, 255).astype(np.uint8).reshape(len(ds), -1)
    out = np.concatenate([ds.labels.astype(np.uint8)[:, None], pix], axis=1)
    out.tofile(path)


def load_cifar10_dir(root) -> tuple[LabeledDataset, LabeledDataset]:
    """Train (data_batch_*.bin) and test (test_batch.bin) sets from an extracted archive."""
    root = Path(root)
    train_files = sorted(root.glob("data_batch_*.bin"))
    if not train_files or not (root / "test_batch.bin").exists():
        raise FileNotFoundError(f"{root}: expected data_batch_*.bin and test_batch.bin")
    parts = [load_cifar10_binary(f) for f in train_files]
    train = LabeledDataset(np.concatenate([p.images for p in parts]),
                           np.concatenate([p.labels for p in parts]), 10, "cifar10-train")
    return train, load_cifar10_binary(root / "test_batch.bin")


def subsample(ds: LabeledDataset, n: int, seed: int) -> LabeledDataset:
    """Seeded subset of ``n`` records, kept in original order."""
    if n > len(ds):
        raise ValueError(f"cannot take {n} of {len(ds)} records")
    idx = np.sort(np.random.default_rng(seed).choice(len(ds), n, replace=False))
    return ds.subset(idx, f"{ds.name}[{n}]")


# -- raw CLD1 ----------------------------------------------------------------------

def save_raw_dataset(ds: LabeledDataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<II", len(ds), ds.classes))
        for img, label in zip(ds.images, ds.labels):
            fh.write(struct.pack("<B", int(label)))
            write_tensor(fh, img)


def load_raw_dataset(path) -> LabeledDataset:
    with open(path, "rb") as fh:
        magic = read_exact(fh, 4, "dataset magic")
        if magic != DATASET_MAGIC:
            raise FormatError(f"{path}: bad dataset magic {magic!r}, expected {DATASET_MAGIC!r}")
        n, classes = struct.unpack("<II", read_exact(fh, 8, "dataset header"))
        labels = np.empty(n, dtype=np.int64)
        images = []
        for t in range(n):
            labels[t] = read_exact(fh, 1, f"label of record {t}")[0]
            img = read_tensor(fh)
            if images and img.shape != images[0].shape:
                raise FormatError(f"{path}: record {t} has shape {img.shape}, expected {images[0].shape}")
            images.append(img)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after {n} records")
    try:
        return LabeledDataset(np.stack(images) if images else np.zeros((0, 0, 0, 0)), labels, classes, Path(path).stem)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def load_tensor_dir(path) -> np.ndarray:
    """Stack every ``*.clt`` tensor in a directory (sorted by name); all must share a shape."""
    files = sorted(Path(path).glob("*.clt"))
    if not files:
        raise FileNotFoundError(f"{path}: no .clt tensor files")
    tensors = [load_tensor(f) for f in files]
    if len({t.shape for t in tensors}) != 1:
        raise FormatError(f"{path}: tensors have differing shapes")
    return np.stack(tensors)


# -- preprocessing -----------------------------------------------------------------

def to_grayscale(images: np.ndarray) -> np.ndarray:
    """Average the planes of (n, planes, rows, cols) into one plane."""
    return np.asarray(images, dtype=np.float64).mean(axis=-3, keepdims=True)


def contrast_normalize_channels(images: np.ndarray, kernel=None, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Contrastive normalization of each channel of each image on its own."""
    kernel = make_gaussian_kernel(9) if kernel is None else kernel
    x = np.asarray(images, dtype=np.float64)
    shape = x.shape
    flat = x.reshape(-1, 1, shape[-2], shape[-1])
    return contrastive_norm(flat, kernel, epsilon).reshape(shape)


def preprocess_contrastive(ds: LabeledDataset, kernel=None, epsilon: float = DEFAULT_EPSILON) -> LabeledDataset:
    return LabeledDataset(contrast_normalize_channels(ds.images, kernel, epsilon), ds.labels.copy(),
                          ds.classes, ds.name)


# -- synthetic data ------------------------------------------------------------------

def bar_pattern(size: int, angle: float, period: float = 6.0) -> np.ndarray:
    """Square-wave grating of parallel bars at ``angle`` radians, values in {0, 1}."""
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size] - c
    # coordinate across the bars
    t = xx * np.cos(angle) + yy * np.sin(angle)
    return (np.cos(2 * np.pi * t / period) >= 0).astype(np.float64)


def synthetic_bars_dataset(classes: int, per_class: int, size: int, noise_sigma: float, seed: int,
                           planes: int = 1, period: float = 6.0) -> LabeledDataset:
    """Class ``c`` is a bar grating at angle pi*c/classes plus Gaussian pixel noise."""
    if classes < 1 or per_class < 0:
        raise ValueError("need at least one class and a non-negative count")
    patterns = np.stack([bar_pattern(size, np.pi * c / classes, period) for c in range(classes)])
    if len({p.tobytes() for p in patterns}) != classes:
        raise ValueError(f"{classes} orientations are not distinguishable at size {size}")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), per_class)
    images = np.repeat(patterns[labels][:, None], planes, axis=1)
    if noise_sigma > 0:
        images = images + rng.normal(0.0, noise_sigma, images.shape)
    return LabeledDataset(images, labels, classes, f"bars{classes}x{per_class}")
