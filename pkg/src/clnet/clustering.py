"""Patch sampling and k-means filter learning."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse

from .layers import ConnectionTable, FilterBank

log = logging.getLogger(__name__)

DEFAULT_MAX_ITERS = 100
DEFAULT_TOL = 1e-6
DEFAULT_N_PATCHES = 100_000
_CHUNK = 4096


@dataclass
class PatchSet:
    """``data`` holds one flattened (planes, h, w) patch per row."""

    data: np.ndarray
    dims: tuple[int, int, int]
    origins: np.ndarray | None = None  # (count, 3): image index, row, col

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] == 0:
            raise ValueError("a patch set needs at least one patch")
        if self.data.shape[1] != int(np.prod(self.dims)):
            raise ValueError(f"patch length {self.data.shape[1]} does not match dims {self.dims}")

    @property
    def count(self) -> int:
        return self.data.shape[0]


@dataclass
class KMeansResult:
    centroids: np.ndarray
    inertia_trace: list[float]
    assignments: np.ndarray
    iterations: int

    @property
    def inertia(self) -> float:
        return self.inertia_trace[-1]


def _image_list(images) -> list[np.ndarray]:
    if isinstance(images, np.ndarray) and images.ndim == 4:
        return [images[i] for i in range(images.shape[0])]
    return [np.asarray(im, dtype=np.float64) for im in images]


def sample_patches(images, h: int, w: int, n: int, seed: int) -> PatchSet:
    """Draw ``n`` patches uniformly over every valid (image, row, col) position."""
    if n < 1:
        raise ValueError("need at least one patch")
    if isinstance(images, np.ndarray) and images.ndim == 4:
        stack = np.asarray(images, dtype=np.float64)
        shapes = [stack.shape[1:]] * stack.shape[0]
    else:
        stack = None
        images = _image_list(images)
        shapes = [im.shape for im in images]
    if not shapes:
        raise ValueError("no images to sample from")
    planes = shapes[0][0]
    counts = []
    for idx, (p, rows, cols) in enumerate(shapes):
        if p != planes:
            raise ValueError(f"image {idx} has {p} planes, expected {planes}")
        if rows < h or cols < w:
            raise ValueError(f"image {idx} ({rows}x{cols}) is smaller than the {h}x{w} patch")
        counts.append((rows - h + 1) * (cols - w + 1))
    counts = np.asarray(counts)
    ends = np.cumsum(counts)

    rng = np.random.default_rng(seed)
    flat = rng.integers(0, ends[-1], size=n)
    img = np.searchsorted(ends, flat, side="right")
    local = flat - (ends[img] - counts[img])
    widths = np.array([s[2] - w + 1 for s in shapes])
    row, col = np.divmod(local, widths[img])

    if stack is not None:
        windows = sliding_window_view(stack, (h, w), axis=(2, 3))
        data = windows[img, :, row, col]
    else:
        data = np.empty((n, planes, h, w))
        for t in range(n):
            data[t] = images[img[t]][:, row[t]:row[t] + h, col[t]:col[t] + w]
    return PatchSet(data.reshape(n, -1), (planes, h, w), np.stack([img, row, col], axis=1))


def _sq_dist_to(x: np.ndarray, xx: np.ndarray, c: np.ndarray) -> np.ndarray:
    cc = float(c @ c)
    d = xx - 2.0 * (x @ c) + cc
    d[d < 1e-12 * (xx + cc)] = 0.0
    return d


def kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    xx = np.einsum("ij,ij->i", x, x)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dist_to(x, xx, x[chosen[0]])
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            nxt = min(nxt, n - 1)
        else:
            nxt = int(rng.integers(n))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dist_to(x, xx, x[nxt]))
    return x[chosen].copy()


def _nearest(x: np.ndarray, xx: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    cc = np.einsum("ij,ij->i", centroids, centroids)
    labels = np.empty(x.shape[0], dtype=np.int64)
    for start in range(0, x.shape[0], _CHUNK):
        sl = slice(start, start + _CHUNK)
        d = xx[sl, None] - 2.0 * (x[sl] @ centroids.T) + cc[None, :]
        labels[sl] = np.argmin(d, axis=1)
    return labels


def _exact_sq(x: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> np.ndarray:
    out = np.empty(x.shape[0])
    for start in range(0, x.shape[0], _CHUNK):
        sl = slice(start, start + _CHUNK)
        diff = x[sl] - centroids[labels[sl]]
        out[sl] = np.einsum("ij,ij->i", diff, diff)
    return out


def _cluster_sums(x: np.ndarray, labels: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    n = x.shape[0]
    onehot = sparse.csr_matrix((np.ones(n), (labels, np.arange(n))), shape=(k, n))
    return np.asarray(onehot @ x), np.bincount(labels, minlength=k)


def kmeans(patches, k: int, max_iters: int = DEFAULT_MAX_ITERS, tol: float = DEFAULT_TOL,
           seed: int = 0) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Stops when the relative inertia improvement drops below ``tol`` or after
    ``max_iters`` assignment steps.  An emptied cluster is moved onto the
    patch currently farthest from its centroid.  The returned centroids are
    the means of the returned assignments.
    """
    x = patches.data if isinstance(patches, PatchSet) else np.asarray(patches, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k must be in 1..{n}, got {k}")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if tol < 0:
        raise ValueError("tol must be >= 0")

    rng = np.random.default_rng(seed)
    centroids = kmeans_plus_plus(x, k, rng)
    xx = np.einsum("ij,ij->i", x, x)
    labels = None
    trace: list[float] = []
    it = 0
    while it < max_iters:
        it += 1
        proposed = _nearest(x, xx, centroids)
        dist = _exact_sq(x, centroids, proposed)
        if labels is not None:
            # keep the old cluster unless the new one is strictly closer in exact arithmetic
            old = _exact_sq(x, centroids, labels)
            keep = old <= dist
            proposed = np.where(keep, labels, proposed)
            dist = np.where(keep, old, dist)
        labels = proposed

        sizes = np.bincount(labels, minlength=k)
        taken: set[int] = set()
        for c in np.flatnonzero(sizes == 0):
            order = np.argsort(-dist, kind="stable")
            far = next(int(i) for i in order if int(i) not in taken)
            taken.add(far)
            labels[far] = c
            centroids[c] = x[far]
            dist[far] = 0.0
        inertia = float(dist.sum())
        trace.append(inertia)
        log.debug("kmeans iteration %d inertia %.6g", it, inertia)

        sums, sizes = _cluster_sums(x, labels, k)
        centroids = sums / sizes[:, None]
        if len(trace) > 1:
            prev = trace[-2]
            if prev <= 0 or (prev - inertia) / prev < tol:
                break
        elif inertia == 0.0:
            break
    return KMeansResult(centroids, trace, labels, it)


def normalize_filters(filters: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-L2 version of each filter (first axis indexes filters)."""
    f = np.asarray(filters, dtype=np.float64)
    flat = f.reshape(f.shape[0], -1)
    flat = flat - flat.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    flat = np.divide(flat, norms, out=np.zeros_like(flat), where=norms > 0)
    return flat.reshape(f.shape)


def learn_layer_filters(dataset, k: int, filter_h: int, filter_w: int,
                        n_patches: int = DEFAULT_N_PATCHES, seed: int = 0, *,
                        normalize: bool = True, table: ConnectionTable | None = None,
                        max_iters: int = DEFAULT_MAX_ITERS, tol: float = DEFAULT_TOL) -> FilterBank:
    """Learn ``k`` filters from patches of ``dataset`` (images or layer outputs).

    Patches span all planes jointly.  With the default full table each filter
    reads every input plane; with a sparse ``table`` output ``j`` keeps only
    the centroid channels listed in its row.
    """
    patches = sample_patches(dataset, filter_h, filter_w, n_patches, seed)
    planes = patches.dims[0]
    result = kmeans(patches, k, max_iters=max_iters, tol=tol, seed=seed)
    centroids = result.centroids.reshape(k, planes, filter_h, filter_w)
    if table is None:
        table = ConnectionTable(planes, tuple(tuple(range(planes)) for _ in range(k)))
    elif table.in_planes != planes or table.out_planes != k:
        raise ValueError(f"table is {table.out_planes}x{table.in_planes}, expected {k}x{planes}")
    filters = [centroids[j, list(row)] for j, row in enumerate(table.rows)]
    if normalize:
        filters = [normalize_filters(f[None])[0] for f in filters]
    log.info("learned %d filters of %dx%dx%d from %d patches in %d iterations",
             k, planes, filter_h, filter_w, patches.count, result.iterations)
    return FilterBank.from_filters(filters, table)


def filter_mosaic(bank: FilterBank, border: int = 1, columns: int | None = None) -> np.ndarray:
    """Grid of 8-bit tiles, one per filter, channels laid side by side.

    Each filter is min-max scaled to 0..255 on its own.
    """
    k = bank.out_planes
    tiles = []
    for j in range(k):
        f = bank.filters(j)
        tile = np.concatenate(list(f), axis=1) if f.shape[0] > 1 else f[0]
        lo, hi = tile.min(), tile.max()
        scaled = (tile - lo) / (hi - lo) * 255.0 if hi > lo else np.zeros_like(tile)
        tiles.append(np.rint(scaled).astype(np.uint8))
    th, tw = tiles[0].shape
    cols = columns or int(np.ceil(np.sqrt(k)))
    rows = int(np.ceil(k / cols))
    out = np.zeros((rows * (th + border) + border, cols * (tw + border) + border), dtype=np.uint8)
    for j, tile in enumerate(tiles):
        r, c = divmod(j, cols)
        y = border + r * (th + border)
        x = border + c * (tw + border)
        out[y:y + th, x:x + tw] = tile
    return out


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Binary P5 greyscale image, maxval 255."""
    img = np.asarray(image, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def dump_mosaic(bank: FilterBank, path: str | Path) -> None:
    write_pgm(path, filter_mosaic(bank))
