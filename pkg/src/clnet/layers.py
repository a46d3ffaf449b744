"""Filtering, pooling and normalization stages of CL and CNN layers.

Every operation takes a single map ``(planes, rows, cols)`` or a batch
``(n, planes, rows, cols)`` and returns the same rank it was given.  None of
them modify their inputs.

Conventions fixed here and relied on everywhere else:

* filtering is valid-mode cross-correlation (no padding, no kernel flip);
* normalization is same-size, and at the borders the local window is
  renormalized to the kernel weight that actually falls inside the image;
* cross-plane weighting divides the spatial kernel by the plane count, so a
  constant input has a local mean equal to that constant.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np
from scipy import ndimage

from .errors import FormatError, UnsupportedOperationError
from .tensor import as_batch, make_gaussian_kernel, read_exact, uniform_kernel

BANK_MAGIC = b"CLF1"
DEFAULT_EPSILON = 1e-6
POOL_MODES = ("literal", "true_l2")


@dataclass(frozen=True)
class ConnectionTable:
    """For each output plane, the input planes it reads."""

    in_planes: int
    rows: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        rows = tuple(tuple(int(i) for i in row) for row in self.rows)
        object.__setattr__(self, "rows", rows)
        if self.in_planes < 1:
            raise ValueError("connection table needs at least one input plane")
        for j, row in enumerate(rows):
            if not row:
                raise ValueError(f"output plane {j} has no inputs")
            if len(set(row)) != len(row):
                raise ValueError(f"output plane {j} lists an input twice: {row}")
            if min(row) < 0 or max(row) >= self.in_planes:
                raise ValueError(f"output plane {j} references an input outside 0..{self.in_planes - 1}: {row}")

    @property
    def out_planes(self) -> int:
        return len(self.rows)

    @property
    def is_full(self) -> bool:
        return all(len(r) == self.in_planes for r in self.rows)

    def mask(self) -> np.ndarray:
        m = np.zeros((self.out_planes, self.in_planes), dtype=bool)
        for j, row in enumerate(self.rows):
            m[j, list(row)] = True
        return m

    def consumers(self, i: int) -> np.ndarray:
        """Output planes that read input plane ``i``."""
        return np.flatnonzero(self.mask()[:, i])


@dataclass(eq=False)
class FilterBank:
    """Multi-channel 2-D filters, one per output plane.

    ``weights`` is stored dense as ``(out_planes, in_planes, h, w)``; entries
    for input planes not listed in the table row are kept at zero.
    """

    weights: np.ndarray
    table: ConnectionTable
    bias: np.ndarray | None = None

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 4:
            raise ValueError(f"filter weights must be 4-D (out, in, h, w), got shape {w.shape}")
        if w.shape[:2] != (self.table.out_planes, self.table.in_planes):
            raise ValueError(
                f"weights shape {w.shape[:2]} does not match table "
                f"({self.table.out_planes} outputs, {self.table.in_planes} inputs)")
        w[~self.table.mask()] = 0.0
        self.weights = w
        if self.bias is not None:
            b = np.array(self.bias, dtype=np.float64).reshape(-1)
            if b.shape != (w.shape[0],):
                raise ValueError(f"bias must have {w.shape[0]} entries, got {b.shape}")
            self.bias = b

    @classmethod
    def from_filters(cls, filters: Sequence[np.ndarray], table: ConnectionTable,
                     bias=None) -> "FilterBank":
        """Build from per-output arrays of shape (len(table.rows[j]), h, w)."""
        if len(filters) != table.out_planes:
            raise ValueError(f"expected {table.out_planes} filters, got {len(filters)}")
        h, w = np.shape(filters[0])[-2:]
        dense = np.zeros((table.out_planes, table.in_planes, h, w))
        for j, (row, f) in enumerate(zip(table.rows, filters)):
            f = np.asarray(f, dtype=np.float64)
            if f.shape != (len(row), h, w):
                raise ValueError(f"filter {j} has shape {f.shape}, expected {(len(row), h, w)}")
            dense[j, list(row)] = f
        return cls(dense, table, bias)

    @property
    def out_planes(self) -> int:
        return self.weights.shape[0]

    @property
    def in_planes(self) -> int:
        return self.weights.shape[1]

    @property
    def filter_h(self) -> int:
        return self.weights.shape[2]

    @property
    def filter_w(self) -> int:
        return self.weights.shape[3]

    def filters(self, j: int) -> np.ndarray:
        """Connected filters of output plane ``j``, shape (fan_in, h, w)."""
        return self.weights[j, list(self.table.rows[j])]

    def tap_count(self) -> int:
        """Filter taps touched per output location, summed over output planes."""
        return sum(len(r) for r in self.table.rows) * self.filter_h * self.filter_w

    def with_weights(self, weights: np.ndarray, bias=None) -> "FilterBank":
        return FilterBank(weights, self.table, self.bias if bias is None else bias)

    def same_as(self, other: "FilterBank") -> bool:
        return (self.table == other.table
                and np.array_equal(self.weights, other.weights)
                and (self.bias is None) == (other.bias is None)
                and (self.bias is None or np.array_equal(self.bias, other.bias)))


# -- filtering ----------------------------------------------------------------

def _check_filtering(x: np.ndarray, bank: FilterBank) -> tuple[int, int]:
    if x.shape[1] != bank.table.in_planes:
        raise ValueError(f"input has {x.shape[1]} planes but the bank expects {bank.table.in_planes}")
    ho = x.shape[2] - bank.filter_h + 1
    wo = x.shape[3] - bank.filter_w + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"{bank.filter_h}x{bank.filter_w} filter larger than {x.shape[2]}x{x.shape[3]} input")
    return ho, wo


def spatial_sad(x: np.ndarray, bank: FilterBank) -> np.ndarray:
    """Sum of absolute differences between each filter and every input window.

    ``out[j, u, v] = sum over i in table[j], p, q of |k[j, i, p, q] - x[i, u+p, v+q]|``
    """
    xb, single = as_batch(x)
    ho, wo = _check_filtering(xb, bank)
    n = xb.shape[0]
    out = np.zeros((bank.out_planes, n, ho, wo))
    w = bank.weights
    mask = bank.table.mask()
    for i in range(bank.in_planes):
        js = np.flatnonzero(mask[:, i])
        full = len(js) == bank.out_planes
        acc = out if full else np.zeros((len(js), n, ho, wo))
        for p in range(bank.filter_h):
            for q in range(bank.filter_w):
                xs = xb[:, i, p:p + ho, q:q + wo]
                k = w[:, i, p, q] if full else w[js, i, p, q]
                acc += np.abs(k[:, None, None, None] - xs[None])
        if not full:
            out[js] += acc
    out = np.moveaxis(out, 0, 1)
    return np.ascontiguousarray(out[0] if single else out)


def spatial_convolution(x: np.ndarray, bank: FilterBank) -> np.ndarray:
    """Valid-mode cross-correlation plus per-output bias."""
    if bank.bias is None:
        raise ValueError("spatial_convolution needs a filter bank with a bias")
    return _correlate(x, bank.weights, bank.bias)


def _correlate(x, weights: np.ndarray, bias: np.ndarray | None):
    xb, single = as_batch(x)
    f, planes, fh, fw = weights.shape
    if xb.shape[1] != planes:
        raise ValueError(f"input has {xb.shape[1]} planes but the bank expects {planes}")
    ho, wo = xb.shape[2] - fh + 1, xb.shape[3] - fw + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"{fh}x{fw} filter larger than {xb.shape[2]}x{xb.shape[3]} input")
    out = np.zeros((xb.shape[0], f, ho, wo))
    for p in range(fh):
        for q in range(fw):
            xs = xb[:, :, p:p + ho, q:q + wo]
            out += np.einsum("fi,bihw->bfhw", weights[:, :, p, q], xs)
    if bias is not None:
        out += bias[None, :, None, None]
    return out[0] if single else out


def apply_filter(x: np.ndarray, bank: FilterBank, op: str) -> np.ndarray:
    """Dispatch to SAD (``"sad"``) or convolution (``"conv"``); conv without bias uses zero bias."""
    if op == "sad":
        return spatial_sad(x, bank)
    if op == "conv":
        return _correlate(x, bank.weights, bank.bias if bank.bias is not None else np.zeros(bank.out_planes))
    raise ValueError(f"unknown filter op {op!r}")


# -- pooling / nonlinearity ---------------------------------------------------------

def _pool_kernel(region: int, kernel) -> np.ndarray:
    if region < 1:
        raise ValueError(f"pool region must be >= 1, got {region}")
    if kernel is None:
        return uniform_kernel(region)
    k = np.asarray(kernel, dtype=np.float64)
    if k.shape != (region, region):
        raise ValueError(f"pool kernel shape {k.shape} does not match region {region}")
    if abs(k.sum() - 1.0) > 1e-9:
        raise ValueError("pool kernel weights must sum to 1")
    return k


def _pool_view(xb: np.ndarray, region: int) -> np.ndarray:
    n, planes, rows, cols = xb.shape
    if rows % region or cols % region:
        raise ValueError(f"{rows}x{cols} map is not divisible by pool region {region}")
    return xb.reshape(n, planes, rows // region, region, cols // region, region)


def l2_pool(x: np.ndarray, region: int = 2, kernel=None, mode: str = "literal") -> np.ndarray:
    """Non-overlapping ``region`` x ``region`` pooling with stride ``region``.

    ``literal`` returns the kernel-weighted sum of the window; ``true_l2``
    returns the square root of the kernel-weighted sum of squares.
    """
    if mode not in POOL_MODES:
        raise ValueError(f"pool mode must be one of {POOL_MODES}, got {mode!r}")
    k = _pool_kernel(region, kernel)
    xb, single = as_batch(x)
    view = _pool_view(xb, region)
    if mode == "literal":
        out = np.einsum("npyaxb,ab->npyx", view, k)
    else:
        out = np.sqrt(np.einsum("npyaxb,ab->npyx", view * view, k))
    return out[0] if single else out


def tanh_map(x: np.ndarray) -> np.ndarray:
    return np.tanh(np.asarray(x, dtype=np.float64))


# -- normalization ------------------------------------------------------------

def _check_norm_kernel(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] % 2 == 0 or w.shape[1] % 2 == 0:
        raise ValueError(f"normalization kernel must be 2-D with odd sides, got shape {w.shape}")
    return w


def _local_sum(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Zero-padded same-size correlation of the last two axes of ``a`` with ``w``."""
    kernel = w.reshape((1,) * (a.ndim - 2) + w.shape)
    return ndimage.correlate(a, kernel, mode="constant", cval=0.0)


def _local_sum_t(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`_local_sum`."""
    return _local_sum(a, w[::-1, ::-1])


def _border_coef(rows: int, cols: int, w: np.ndarray) -> np.ndarray:
    return _local_sum(np.ones((rows, cols)), w)


def _local_mean(xb: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    planes = xb.shape[1]
    coef = _border_coef(xb.shape[2], xb.shape[3], w)
    return _local_sum(xb.sum(axis=1), w) / (planes * coef), coef


def subtractive_norm(x: np.ndarray, w) -> np.ndarray:
    """Subtract the cross-plane, kernel-weighted local mean from every component."""
    w = _check_norm_kernel(w)
    xb, single = as_batch(x)
    mean, _ = _local_mean(xb, w)
    v = xb - mean[:, None]
    return v[0] if single else v


def local_std(v: np.ndarray, w) -> np.ndarray:
    """Cross-plane weighted local standard deviation, shape (n, rows, cols) or (rows, cols)."""
    w = _check_norm_kernel(w)
    vb, single = as_batch(v)
    s2, _ = _local_mean(vb * vb, w)
    sigma = np.sqrt(np.maximum(s2, 0.0))
    return sigma[0] if single else sigma


def divisive_norm(v: np.ndarray, w, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Divide by ``max(mean(sigma), sigma, epsilon)`` where sigma is the local std."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon!r}")
    vb, single = as_batch(v)
    sigma = local_std(vb, w)
    mean_sigma = sigma.mean(axis=(1, 2), keepdims=True)
    denom = np.maximum(np.maximum(mean_sigma, sigma), epsilon)
    y = vb / denom[:, None]
    return y[0] if single else y


def contrastive_norm(x: np.ndarray, w, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    return divisive_norm(subtractive_norm(x, w), w, epsilon)


# -- composite layers ---------------------------------------------------------

def _default_norm_kernel() -> np.ndarray:
    return make_gaussian_kernel(9)


@dataclass
class LayerParams:
    """Everything one CL or CNN layer needs besides its input."""

    bank: FilterBank
    pool_region: int = 2
    pool_kernel: np.ndarray | None = None
    pool_mode: str = "literal"
    contrast_kernel: np.ndarray = field(default_factory=_default_norm_kernel)
    norm_kernel: np.ndarray = field(default_factory=_default_norm_kernel)
    epsilon: float = DEFAULT_EPSILON
    op: str = "sad"


def cl_layer_forward(x: np.ndarray, params: LayerParams) -> np.ndarray:
    """SAD filtering, contrastive norm, pooling, tanh, subtractive norm."""
    y = apply_filter(x, params.bank, params.op)
    y = contrastive_norm(y, params.contrast_kernel, params.epsilon)
    y = l2_pool(y, params.pool_region, params.pool_kernel, params.pool_mode)
    y = tanh_map(y)
    return subtractive_norm(y, params.norm_kernel)


def cnn_layer_forward(x: np.ndarray, params: LayerParams) -> np.ndarray:
    """Convolution, pooling, tanh, subtractive norm."""
    y = spatial_convolution(x, params.bank)
    y = l2_pool(y, params.pool_region, params.pool_kernel, params.pool_mode)
    y = tanh_map(y)
    return subtractive_norm(y, params.norm_kernel)


# -- backward -----------------------------------------------------------------

def _conv_backward(x, g, bank: FilterBank):
    xb, single = as_batch(x)
    gb, _ = as_batch(g)
    fh, fw = bank.filter_h, bank.filter_w
    ho, wo = gb.shape[2], gb.shape[3]
    mask = bank.table.mask()
    grad_w = np.zeros_like(bank.weights)
    grad_in = np.zeros_like(xb)
    for p in range(fh):
        for q in range(fw):
            xs = xb[:, :, p:p + ho, q:q + wo]
            grad_w[:, :, p, q] = np.einsum("bfhw,bihw->fi", gb, xs)
            grad_in[:, :, p:p + ho, q:q + wo] += np.einsum("bfhw,fi->bihw", gb, bank.weights[:, :, p, q])
    grad_w[~mask] = 0.0
    grad_b = gb.sum(axis=(0, 2, 3))
    return (grad_in[0] if single else grad_in), {"weights": grad_w, "bias": grad_b}


def _pool_backward(x, g, params):
    region = params.get("region", 2)
    mode = params.get("mode", "literal")
    k = _pool_kernel(region, params.get("kernel"))
    xb, single = as_batch(x)
    gb, _ = as_batch(g)
    n, planes, ho, wo = gb.shape
    spread = gb[:, :, :, None, :, None] * k[None, None, None, :, None, :]
    if mode == "true_l2":
        view = _pool_view(xb, region)
        y = np.sqrt(np.einsum("npyaxb,ab->npyx", view * view, k))
        inv = np.divide(1.0, y, out=np.zeros_like(y), where=y > 0)
        spread = spread * view * inv[:, :, :, None, :, None]
    elif mode != "literal":
        raise ValueError(f"pool mode must be one of {POOL_MODES}, got {mode!r}")
    grad = spread.reshape(n, planes, ho * region, wo * region)
    return grad[0] if single else grad


def _subtractive_backward(g, w):
    w = _check_norm_kernel(w)
    gb, single = as_batch(g)
    planes = gb.shape[1]
    coef = _border_coef(gb.shape[2], gb.shape[3], w)
    back = _local_sum_t(gb.sum(axis=1) / coef, w) / planes
    grad = gb - back[:, None]
    return grad[0] if single else grad


def layer_backward(kind: str, x: np.ndarray, grad_out: np.ndarray, params=None):
    """Gradient of one forward stage with respect to its input (and parameters).

    ``kind`` is one of ``"convolution"`` (params: FilterBank), ``"l2_pool"``
    (params: dict with ``region``, ``kernel``, ``mode``), ``"tanh"``
    (params ignored) or ``"subtractive_norm"`` (params: the kernel).
    Returns ``(grad_in, grad_params)``; ``grad_params`` is empty for
    parameter-free stages.
    """
    if kind == "convolution":
        return _conv_backward(x, grad_out, params)
    if kind == "l2_pool":
        return _pool_backward(x, grad_out, params or {}), {}
    if kind == "tanh":
        t = np.tanh(np.asarray(x, dtype=np.float64))
        return np.asarray(grad_out) * (1.0 - t * t), {}
    if kind == "subtractive_norm":
        return _subtractive_backward(grad_out, params), {}
    if kind in ("sad", "spatial_sad", "divisive_norm", "contrastive_norm"):
        raise UnsupportedOperationError(f"no backward pass for {kind}: those stages are never trained")
    raise ValueError(f"unknown layer kind {kind!r}")


def cnn_layer_backward(x: np.ndarray, grad_out: np.ndarray, params: LayerParams):
    """Backward through a whole CNN layer; returns (grad_in, {"weights", "bias"})."""
    c = spatial_convolution(x, params.bank)
    pooled = l2_pool(c, params.pool_region, params.pool_kernel, params.pool_mode)
    g = layer_backward("subtractive_norm", None, grad_out, params.norm_kernel)[0]
    g = layer_backward("tanh", pooled, g)[0]
    g = layer_backward("l2_pool", c, g, {"region": params.pool_region,
                                         "kernel": params.pool_kernel,
                                         "mode": params.pool_mode})[0]
    return layer_backward("convolution", x, g, params.bank)


# -- serialization ------------------------------------------------------------

_U32 = struct.Struct("<I")


def write_bank(fh: BinaryIO, bank: FilterBank) -> None:
    fh.write(BANK_MAGIC)
    fh.write(struct.pack("<IIIII", bank.out_planes, bank.in_planes, bank.filter_h, bank.filter_w,
                         int(bank.bias is not None)))
    for row in bank.table.rows:
        fh.write(_U32.pack(len(row)))
        fh.write(np.asarray(row, dtype="<u4").tobytes())
    for j in range(bank.out_planes):
        fh.write(bank.filters(j).astype("<f8").tobytes())
    if bank.bias is not None:
        fh.write(bank.bias.astype("<f8").tobytes())


def read_bank(fh: BinaryIO) -> FilterBank:
    magic = read_exact(fh, 4, "filter bank magic")
    if magic != BANK_MAGIC:
        raise FormatError(f"bad filter bank magic {magic!r}, expected {BANK_MAGIC!r}")
    out_planes, in_planes, h, w, has_bias = struct.unpack("<IIIII", read_exact(fh, 20, "filter bank header"))
    rows = []
    for _ in range(out_planes):
        (n,) = _U32.unpack(read_exact(fh, 4, "connection row length"))
        rows.append(tuple(np.frombuffer(read_exact(fh, 4 * n, "connection row"), dtype="<u4").tolist()))
    try:
        table = ConnectionTable(in_planes, tuple(rows))
    except ValueError as exc:
        raise FormatError(f"invalid connection table: {exc}") from exc
    filters = []
    for row in rows:
        buf = read_exact(fh, 8 * len(row) * h * w, "filter weights")
        filters.append(np.frombuffer(buf, dtype="<f8").reshape(len(row), h, w))
    bias = None
    if has_bias:
        bias = np.frombuffer(read_exact(fh, 8 * out_planes, "bias"), dtype="<f8").copy()
    return FilterBank.from_filters(filters, table, bias)


def save_bank(path, bank: FilterBank) -> None:
    with open(path, "wb") as fh:
        write_bank(fh, bank)


def load_bank(path) -> FilterBank:
    with open(path, "rb") as fh:
        bank = read_bank(fh)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after filter bank")
    return bank
