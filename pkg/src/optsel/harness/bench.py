"""Wall-clock benchmark of the scoring kernels against the analytic cost model."""

from __future__ import annotations

import csv
import io
import itertools
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from ..errors import ConfigError
from ..gradcore import BATCH_KERNELS, FactorPair, KernelDims, SampleGradient, StackedFactors, cost_model

BENCH_KERNELS = ("naive", "ghost", "reordered")
CSV_HEADER = ("L", "T", "B_tr", "B_val", "d1", "d2", "kernel", "seconds", "predicted_ops", "predicted_space")


def default_grid() -> list[KernelDims]:
    pts = []
    for T, (d1, d2) in itertools.product((32, 64, 128, 256), ((4, 4), (8, 8), (32, 16))):
        pts.append(KernelDims(2, T, 8, 8, d1, d2))
    return pts


def parse_grid(spec: str) -> list[KernelDims]:
    """``"L,T,B_tr,B_val,d1,d2;..."`` to grid points."""
    pts = []
    for chunk in filter(None, (c.strip() for c in spec.split(";"))):
        try:
            vals = [int(v) for v in chunk.split(",")]
        except ValueError:
            raise ConfigError(f"grid point {chunk!r} is not a list of integers") from None
        if len(vals) != 6:
            raise ConfigError(f"grid point {chunk!r} needs 6 integers L,T,B_tr,B_val,d1,d2")
        if min(vals) < 1:
            raise ConfigError(f"grid point {chunk!r} has a non-positive dimension")
        pts.append(KernelDims(*vals))
    return pts


def predicted_ops(kernel: str, dims: KernelDims) -> int:
    """Cost of the variant the implementation actually runs."""
    if kernel == "reordered":
        return min(cost_model("reordered", dims).time_ops, cost_model("reordered_sym", dims).time_ops)
    return cost_model(kernel, dims).time_ops


def _samples(rng: np.random.Generator, count: int, dims: KernelDims, offset: int = 0) -> list[SampleGradient]:
    return [
        SampleGradient(offset + i, tuple(
            FactorPair(l, rng.standard_normal((dims.d1, dims.T)), rng.standard_normal((dims.d2, dims.T)))
            for l in range(dims.L)))
        for i in range(count)
    ]


def time_call(fn, min_total: float = 0.02, max_repeats: int = 50) -> float:
    """Best-of-N wall time after one warm-up call."""
    fn()
    best, spent, n = float("inf"), 0.0, 0
    while n < 3 or (spent < min_total and n < max_repeats):
        t0 = time.perf_counter()
        fn()
        dt = time.perf_counter() - t0
        best, spent, n = min(best, dt), spent + dt, n + 1
    return best


@dataclass
class BenchResult:
    rows: list[dict]
    spearman: float
    exponents: dict[str, float] = field(default_factory=dict)
    reordered_wins: dict[tuple, bool] = field(default_factory=dict)

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_HEADER, lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows)
        return buf.getvalue()


def bench_kernels(grid: Iterable[KernelDims] | None = None, kernels: Sequence[str] = BENCH_KERNELS,
                  seed: int = 0, min_total: float = 0.02) -> BenchResult:
    """Time each kernel on each grid point and compare with the predicted op counts.

    ``exponents`` holds the log-log slope of measured time against predicted
    ops per kernel; a slope near 1 means the model captures the scaling.
    """
    grid = list(default_grid() if grid is None else grid)
    rng = np.random.default_rng(seed)
    rows, wins = [], {}
    for dims in grid:
        dims = KernelDims(*(int(v) for v in dims))
        # stacked once up front so timings cover the arithmetic, not list marshalling
        train = StackedFactors.of(_samples(rng, dims.B_tr, dims))
        val = StackedFactors.of(_samples(rng, dims.B_val, dims, offset=dims.B_tr))
        measured = {}
        for k in kernels:
            fn = BATCH_KERNELS[k]
            measured[k] = time_call(lambda: fn(train, val), min_total)
            space = cost_model(k, dims).space_units
            rows.append({**dims._asdict(), "kernel": k, "seconds": measured[k],
                         "predicted_ops": predicted_ops(k, dims), "predicted_space": space})
        if "ghost" in measured and "reordered" in measured:
            wins[tuple(dims)] = measured["reordered"] < measured["ghost"]
    t = np.array([r["seconds"] for r in rows])
    p = np.array([r["predicted_ops"] for r in rows], dtype=np.float64)
    rho = float(stats.spearmanr(t, p).statistic) if len(rows) > 2 else float("nan")
    exps = {}
    for k in kernels:
        sel = [i for i, r in enumerate(rows) if r["kernel"] == k]
        if len(set(p[sel])) > 1:
            exps[k] = float(np.polyfit(np.log(p[sel]), np.log(t[sel]), 1)[0])
    return BenchResult(rows, rho, exps, wins)
