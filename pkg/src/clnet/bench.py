"""Timing of SAD vs convolution kernels and end-to-end feature extraction.

Numbers depend on the machine they were measured on; every report carries an
environment descriptor for that reason.
"""
from __future__ import annotations

import json
import os
import platform
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .layers import FilterBank, spatial_convolution, spatial_sad
from .network import build_network, forward_features, preset, random_connection_table, random_filter_bank
from .reference import naive_convolution, naive_sad

MIN_REPS = 3


@dataclass(frozen=True)
class KernelCase:
    planes: int
    rows: int
    cols: int
    filters: int
    size: int
    fan_in: int | None = None

    def label(self) -> str:
        fan = "full" if self.fan_in is None else f"fan{self.fan_in}"
        return f"{self.planes}x{self.rows}x{self.cols}/{self.filters}@{self.size}x{self.size}/{fan}"


DEFAULT_CASES = (
    KernelCase(3, 32, 32, 16, 5),
    KernelCase(16, 14, 14, 128, 5),
    KernelCase(1, 46, 46, 16, 7),
    KernelCase(16, 20, 20, 128, 7, 8),
)


@dataclass
class BenchResult:
    name: str
    kernel: str
    shape: str
    reps: int
    median_s: float = float("nan")
    times_s: list[float] = field(default_factory=list)
    ops: int = 0
    ops_per_s: float = float("nan")
    frames_per_s: float = float("nan")
    status: str = "ok"
    message: str = ""


@dataclass
class BenchReport:
    results: list[BenchResult]
    environment: dict

    def to_json(self) -> str:
        return json.dumps({"environment": self.environment, "results": [asdict(r) for r in self.results]},
                          indent=2, default=float)

    def rows(self) -> list[list]:
        return [[r.name, r.kernel, r.shape, r.reps, f"{r.median_s:.6g}", r.ops, f"{r.ops_per_s:.4g}",
                 f"{r.frames_per_s:.4g}", r.status, r.message] for r in self.results]

    header = ["name", "kernel", "shape", "reps", "median_s", "ops", "ops_per_s", "frames_per_s", "status", "message"]

    def table(self) -> str:
        rows = [self.header] + self.rows()
        widths = [max(len(str(r[i])) for r in rows) for i in range(len(self.header))]
        lines = ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
        env = ", ".join(f"{k}={v}" for k, v in self.environment.items())
        return "\n".join(lines + [f"# environment (numbers are not portable): {env}"])


def worker_count() -> int:
    env = os.environ.get("CLNET_THREADS")
    n = os.cpu_count() or 1
    return max(1, min(n, int(env))) if env else n


def environment(threads: int) -> dict:
    cpu = platform.processor() or platform.machine()
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.startswith("model name"):
                    cpu = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    return {"cpu": cpu, "threads": threads, "cores": os.cpu_count(), "python": platform.python_version(),
            "numpy": np.__version__}


def _median_time(fn: Callable[[], object], reps: int) -> tuple[float, list[float]]:
    if reps < MIN_REPS:
        raise ValueError(f"need at least {MIN_REPS} repetitions, got {reps}")
    times = []
    for _ in range(reps + 1):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    times = times[1:]  # first run is warm-up
    return statistics.median(times), times


def _parallel_over_planes(kernel, bank: FilterBank, workers: int):
    """Split the output planes into ``workers`` sub-banks evaluated on threads."""
    groups = [g for g in np.array_split(np.arange(bank.out_planes), workers) if len(g)]
    subs = []
    for g in groups:
        rows = tuple(bank.table.rows[j] for j in g)
        table = type(bank.table)(bank.table.in_planes, rows)
        subs.append(FilterBank(bank.weights[g], table, None if bank.bias is None else bank.bias[g]))

    def run(x):
        with ThreadPoolExecutor(len(subs)) as pool:
            return np.concatenate(list(pool.map(lambda b: kernel(x, b), subs)), axis=-3)
    return run


def bench_kernels(cases: Sequence[KernelCase] = DEFAULT_CASES, reps: int = 5, seed: int = 0, *,
                  parallel: bool = False, kernels: dict | None = None) -> BenchReport:
    """Median timing of SAD and convolution on identical random inputs.

    Each case is first checked against the naive loop kernels; a case whose
    fast kernel disagrees is reported as failed and never timed.  ``kernels``
    may replace the fast implementations (``{"sad": fn, "conv": fn}``).
    """
    if reps < MIN_REPS:
        raise ValueError(f"need at least {MIN_REPS} repetitions, got {reps}")
    fast = {"sad": spatial_sad, "conv": spatial_convolution}
    fast.update(kernels or {})
    oracles = {"sad": naive_sad, "conv": naive_convolution}
    threads = worker_count() if parallel else 1
    rng = np.random.default_rng(seed)
    results = []
    with threadpool_limits(limits=threads):
        for case in cases:
            x = rng.normal(size=(case.planes, case.rows, case.cols))
            table = None
            if case.fan_in is not None:
                table = random_connection_table(case.planes, case.filters, case.fan_in, int(rng.integers(2**31)))
            bank = random_filter_bank((case.filters, case.planes, case.size, case.size), table,
                                      int(rng.integers(2**31)))
            bank = bank.with_weights(bank.weights, rng.normal(size=case.filters))
            out_px = (case.rows - case.size + 1) * (case.cols - case.size + 1)
            ops = bank.tap_count() * out_px
            for kind in ("sad", "conv"):
                res = BenchResult(case.label(), kind + ("-parallel" if parallel else ""), case.label(), reps, ops=ops)
                fn = fast[kind]
                try:
                    got = fn(x, bank)
                    want = oracles[kind](x, bank)
                    err = np.max(np.abs(got - want)) / max(1.0, np.max(np.abs(want)))
                    if got.shape != want.shape or not err <= 1e-10:
                        raise AssertionError(f"kernel disagrees with reference (relative error {err:.3g})")
                except Exception as exc:  # noqa: BLE001 - any failure aborts the case
                    res.status = "failed"
                    res.message = f"oracle pre-check: {exc}"
                    results.append(res)
                    continue
                if parallel and threads > 1:
                    split = _parallel_over_planes(fn, bank, threads)
                    call = lambda: split(x)  # noqa: E731
                else:
                    call = lambda: fn(x, bank)  # noqa: E731
                res.median_s, res.times_s = _median_time(call, reps)
                res.ops_per_s = ops / res.median_s
                results.append(res)
    return BenchReport(results, environment(threads))


def bench_network_fps(preset_name: str = "realtime-46", reps: int = 10, seed: int = 0, *,
                      zero_filters: bool = False) -> BenchReport:
    """Median single-image ``forward_features`` latency and the implied frame rate."""
    if reps < MIN_REPS:
        raise ValueError(f"need at least {MIN_REPS} repetitions, got {reps}")
    spec = preset(preset_name, seed=seed)
    net = build_network(spec)
    if zero_filters:
        for bank in net.banks + ([net.projection] if net.projection is not None else []):
            bank.weights[...] = 0.0
    rng = np.random.default_rng(seed)
    inputs = rng.normal(size=(reps + 1,) + spec.input_shape)
    counter = iter(range(reps + 1))
    with threadpool_limits(limits=1):
        median, times = _median_time(lambda: forward_features(net, inputs[next(counter)]), reps)
    ops = 0
    for bank, layer, (_, rows, cols) in zip(net.banks, spec.layers, spec.layer_shapes()):
        ops += bank.tap_count() * rows * cols * layer.pool ** 2
    if net.projection is not None:
        ops += net.projection.tap_count()
    res = BenchResult(preset_name, "network" + ("-zero" if zero_filters else ""),
                      "x".join(map(str, spec.input_shape)), reps, median, times, int(ops),
                      ops / median, 1.0 / median)
    return BenchReport([res], environment(1))
