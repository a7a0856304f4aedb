"""Attention complexity benchmark.

Times three mechanisms across a sweep of pixel counts n and fits log-log
runtime slopes by least squares:

  exact -- the quadratic oracle that materializes the full n*n attention
           matrix; its slope should exceed 1.7,
  ltm   -- the channel-similarity path (project, r*c similarity, normalize);
           slope should stay under 1.3,
  sta   -- the sliding-window patch attention core; slope should also stay
           under 1.3.

Each point is the median of several repeats after one warmup, with BLAS
threading pinned to one thread during timing so slopes are not distorted by
parallel speedups at large sizes. A point whose (max - min)/median spread
exceeds 20% is flagged unreliable.
"""

from __future__ import annotations

import gc
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from . import ltm, sta
from . import tensor as T
from .rng import Rng
from .tensor import Tensor

EXACT_SLOPE_MIN = 1.7
LINEAR_SLOPE_MAX = 1.3
SPREAD_LIMIT = 0.20


@contextmanager
def _single_thread():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        yield
        return
    with threadpool_limits(limits=1):
        yield


@dataclass
class BenchRow:
    mechanism: str
    n: int
    c: int
    k: int
    d: int
    seconds: float
    spread: float
    slope: float = float("nan")

    @property
    def reliable(self) -> bool:
        return self.spread <= SPREAD_LIMIT


@dataclass
class BenchReport:
    rows: List[BenchRow]
    slopes: Dict[str, float]
    passes: Dict[str, bool]
    thresholds: Dict[str, float] = field(default_factory=lambda: {
        "exact": EXACT_SLOPE_MIN, "ltm": LINEAR_SLOPE_MAX, "sta": LINEAR_SLOPE_MAX,
    })

    @property
    def all_pass(self) -> bool:
        return all(self.passes.values())

    def unreliable_rows(self) -> List[BenchRow]:
        return [r for r in self.rows if not r.reliable]


def median_time(fn, repeats: int, warmup: int = 1):
    """(median seconds, relative spread) with GC paused during timing."""
    for _ in range(warmup):
        fn()
    times = []
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
    finally:
        if was_enabled:
            gc.enable()
    med = float(np.median(times))
    spread = float((max(times) - min(times)) / med) if med > 0 else 0.0
    return med, spread


def fit_loglog_slope(ns, ts) -> float:
    return float(np.polyfit(np.log(np.asarray(ns, float)), np.log(np.asarray(ts, float)), 1)[0])


def _validate_sizes(sizes, what):
    if len(sizes) < 3:
        raise ValueError(f"{what}: need >= 3 sizes, got {sizes}")
    if max(sizes) < 16 * min(sizes):
        raise ValueError(f"{what}: sizes must span >= 16x, got {sizes}")


def _time_exact(sizes, c, repeats, rng) -> List[BenchRow]:
    rows = []
    basis = ltm.make_projection_basis(c, rng.u64_scalar())
    for n in sizes:
        q = (rng.uniform((n, c)) * 2 - 1).astype(np.float32)
        m = (rng.uniform((n, c)) * 2 - 1).astype(np.float32)
        med, spread = median_time(lambda: ltm.exact_attention_oracle(q, m, basis), repeats)
        rows.append(BenchRow("exact", n, c, 0, 0, med, spread))
    return rows


def _time_ltm(sizes, c, repeats, rng) -> List[BenchRow]:
    rows = []
    basis = ltm.make_projection_basis(c, rng.u64_scalar())
    for n in sizes:
        mem = ltm.FeatureMemory(Tensor((rng.uniform((n, c)) * 2 - 1).astype(np.float32)), frames=1)
        q = Tensor((rng.uniform((n, c)) * 2 - 1).astype(np.float32))
        med, spread = median_time(lambda: ltm.attend(mem, q, basis), repeats)
        rows.append(BenchRow("ltm", n, c, 0, 0, med, spread))
    return rows


def _time_sta(sizes, c, k, d, repeats, rng) -> List[BenchRow]:
    rows = []
    for n in sizes:
        side = int(round(np.sqrt(n)))
        q = Tensor((rng.uniform((side, side, c)) * 2 - 1).astype(np.float32))
        y = Tensor((rng.uniform((side, side, c)) * 2 - 1).astype(np.float32))

        def run():
            xq = sta.separate(q, k, d)
            yn = sta.separate(y, k, d)
            retrieved = sta.patch_retrieve(sta.patch_similarity(xq, yn), yn)
            return T.layer_norm(sta.recover(retrieved))

        med, spread = median_time(run, repeats)
        rows.append(BenchRow("sta", side * side, c, k, d, med, spread))
    return rows


def run_benchmark(sizes_linear, sizes_exact, c: int = 32, k: int = 8, d: int = 4,
                  repeats: int = 5, seed: int = 0) -> BenchReport:
    _validate_sizes(sizes_linear, "linear sizes")
    _validate_sizes(sizes_exact, "exact sizes")
    if max(sizes_exact) > ltm.MAX_ORACLE_ROWS:
        raise ValueError(f"exact sizes exceed the oracle cap {ltm.MAX_ORACLE_ROWS}")
    rng = Rng(seed)
    with _single_thread():
        rows = (_time_exact(sizes_exact, c, repeats, rng.split("exact"))
                + _time_ltm(sizes_linear, c, repeats, rng.split("ltm"))
                + _time_sta(sizes_linear, c, k, d, repeats, rng.split("sta")))

    slopes = {}
    for mech in ("exact", "ltm", "sta"):
        pts = [r for r in rows if r.mechanism == mech]
        slope = fit_loglog_slope([r.n for r in pts], [r.seconds for r in pts])
        slopes[mech] = slope
        for r in pts:
            r.slope = slope
    passes = {
        "exact": slopes["exact"] > EXACT_SLOPE_MIN,
        "ltm": slopes["ltm"] < LINEAR_SLOPE_MAX,
        "sta": slopes["sta"] < LINEAR_SLOPE_MAX,
    }
    return BenchReport(rows, slopes, passes)


def report_csv(report: BenchReport) -> str:
    lines = ["mechanism,n,c,k,d,seconds,spread,slope,reliable"]
    for r in report.rows:
        lines.append(f"{r.mechanism},{r.n},{r.c},{r.k},{r.d},"
                     f"{r.seconds:.6f},{r.spread:.4f},{r.slope:.4f},{str(r.reliable).lower()}")
    return "\n".join(lines) + "\n"


def report_markdown(report: BenchReport) -> str:
    lines = [
        "| mechanism | n | c | k | d | seconds | spread | slope |",
        "|---|---|---|---|---|---|---|---|",
    ]
    for r in report.rows:
        note = "" if r.reliable else " (unreliable, rerun advised)"
        lines.append(f"| {r.mechanism} | {r.n} | {r.c} | {r.k} | {r.d} | "
                     f"{r.seconds:.6f} | {r.spread:.2f}{note} | {r.slope:.3f} |")
    lines.append("")
    for mech, slope in report.slopes.items():
        bound = report.thresholds[mech]
        rel = ">" if mech == "exact" else "<"
        verdict = "PASS" if report.passes[mech] else "FAIL"
        lines.append(f"- {mech}: slope {slope:.3f} (want {rel} {bound}) {verdict}")
    return "\n".join(lines) + "\n"
