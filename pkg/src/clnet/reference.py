"""Loop-per-output-pixel reference kernels.

Slow and obvious on purpose; the benchmark refuses to time a fast kernel
until it agrees with these.
"""
import numpy as np

from .layers import FilterBank


def naive_sad(x: np.ndarray, bank: FilterBank) -> np.ndarray:
    planes, rows, cols = x.shape
    fh, fw = bank.filter_h, bank.filter_w
    out = np.zeros((bank.out_planes, rows - fh + 1, cols - fw + 1))
    for j, row in enumerate(bank.table.rows):
        for u in range(out.shape[1]):
            for v in range(out.shape[2]):
                total = 0.0
                for i in row:
                    total += np.abs(bank.weights[j, i] - x[i, u:u + fh, v:v + fw]).sum()
                out[j, u, v] = total
    return out


def naive_convolution(x: np.ndarray, bank: FilterBank) -> np.ndarray:
    planes, rows, cols = x.shape
    fh, fw = bank.filter_h, bank.filter_w
    out = np.zeros((bank.out_planes, rows - fh + 1, cols - fw + 1))
    bias = bank.bias if bank.bias is not None else np.zeros(bank.out_planes)
    for j, row in enumerate(bank.table.rows):
        for u in range(out.shape[1]):
            for v in range(out.shape[2]):
                total = bias[j]
                for i in row:
                    total += (bank.weights[j, i] * x[i, u:u + fh, v:v + fw]).sum()
                out[j, u, v] = total
    return out
