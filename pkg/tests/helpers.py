"""Shared builders and independent oracles for the test suite."""
from __future__ import annotations

import numpy as np

from clnet.layers import ConnectionTable, FilterBank


def random_table(rng: np.random.Generator, in_planes: int, out_planes: int, sparse: bool) -> ConnectionTable:
    if not sparse or in_planes == 1:
        return ConnectionTable(in_planes, tuple(tuple(range(in_planes)) for _ in range(out_planes)))
    rows = []
    for _ in range(out_planes):
        fan = int(rng.integers(1, in_planes + 1))
        rows.append(tuple(sorted(rng.choice(in_planes, fan, replace=False).tolist())))
    return ConnectionTable(in_planes, tuple(rows))


def random_bank(rng: np.random.Generator, in_planes: int, out_planes: int, fh: int, fw: int,
                sparse: bool = False, bias: bool = True) -> FilterBank:
    table = random_table(rng, in_planes, out_planes, sparse)
    b = rng.normal(size=out_planes) if bias else None
    return FilterBank(rng.normal(size=(out_planes, in_planes, fh, fw)), table, b)


def loop_sad(x, bank):
    """Scalar-loop SAD written against the definition, no vectorization."""
    p, rows, cols = x.shape
    fh, fw = bank.filter_h, bank.filter_w
    out = np.zeros((bank.out_planes, rows - fh + 1, cols - fw + 1))
    for j, row in enumerate(bank.table.rows):
        for u in range(rows - fh + 1):
            for v in range(cols - fw + 1):
                s = 0.0
                for i in row:
                    for a in range(fh):
                        for b in range(fw):
                            s += abs(x[i, u + a, v + b] - bank.weights[j, i, a, b])
                out[j, u, v] = s
    return out


def loop_conv(x, bank):
    p, rows, cols = x.shape
    fh, fw = bank.filter_h, bank.filter_w
    out = np.zeros((bank.out_planes, rows - fh + 1, cols - fw + 1))
    for j, row in enumerate(bank.table.rows):
        for u in range(rows - fh + 1):
            for v in range(cols - fw + 1):
                s = bank.bias[j]
                for i in row:
                    s += float(np.sum(x[i, u:u + fh, v:v + fw] * bank.weights[j, i]))
                out[j, u, v] = s
    return out


def loop_local_mean(x, w):
    """Border-renormalized weighted local mean across planes, by explicit windows."""
    p, rows, cols = x.shape
    kr, kc = w.shape[0] // 2, w.shape[1] // 2
    out = np.zeros((rows, cols))
    for r in range(rows):
        for c in range(cols):
            num = den = 0.0
            for a in range(-kr, kr + 1):
                for b in range(-kc, kc + 1):
                    rr, cc = r + a, c + b
                    if 0 <= rr < rows and 0 <= cc < cols:
                        num += w[a + kr, b + kc] * x[:, rr, cc].sum() / p
                        den += w[a + kr, b + kc]
            out[r, c] = num / den
    return out


def central_difference(f, x: np.ndarray, step: float = 1e-5, idx=None) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` over the flat indices ``idx`` (all by default)."""
    grad = np.zeros(x.size)
    flat = x.reshape(-1)
    idx = range(x.size) if idx is None else idx
    for k in idx:
        old = flat[k]
        flat[k] = old + step
        fp = f()
        flat[k] = old - step
        fm = f()
        flat[k] = old
        grad[k] = (fp - fm) / (2 * step)
    return grad.reshape(x.shape)


def rel_error(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(floor, np.max(np.abs(a)), np.max(np.abs(b))))


# acceptance results, one line per criterion, printed in the terminal summary
CRITERIA: dict[int, str] = {}


def report(number: int, passed: bool | None, detail: str) -> None:
    status = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
    line = f"criterion {number:2d}: {status}  {detail}"
    CRITERIA[number] = line
    print(line)
