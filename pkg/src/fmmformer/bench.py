"""Wall time and peak memory of attention forward/backward passes as the
sequence grows.

Times are medians over repeats taken without allocation tracing; peak bytes
come from one extra traced run (``tracemalloc`` sees numpy buffers) plus the
inputs themselves.
"""
from __future__ import annotations

import csv
import math
import os
import platform
import time
import tracemalloc
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import attention as att
from . import grad as gr
from .numerics import rand_matrix

BENCH_VARIANTS = ("softmax", "fmm", "linear", "band")
DEFAULT_LENGTHS = (256, 512, 1024, 2048, 4096, 8192)
HEAD_DIM = 32


@dataclass
class BenchRecord:
    variant: str
    n: int
    fwd_s: float
    bwd_s: float
    peak_bytes: int
    repeats: int
    feasible: bool = True


def _passes(variant: str, bandwidth: int, maps, causal: bool):
    """``(forward, backward)`` callables for one variant; forward returns the
    saved state that backward consumes."""
    if variant == "softmax":
        return (lambda q, k, v: gr.dense_softmax_forward(q, k, v, causal),
                gr.backward_dense_softmax)
    if variant == "linear":
        return (lambda q, k, v: gr.far_field_forward(q, k, v, maps, causal),
                gr.backward_far_field)
    if variant == "band":
        return (lambda q, k, v: gr.near_field_forward(q, k, v, bandwidth, causal),
                gr.backward_near_field)
    if variant == "fmm":
        def fwd(q, k, v):
            cfg = att.AttentionConfig(min(bandwidth, q.shape[-2] - 1), maps, causal)
            return gr.fmm_forward(q, k, v, cfg)
        return fwd, gr.backward_blend
    raise ValueError(f"unknown bench variant {variant!r}; choose from {BENCH_VARIANTS}")


def measure(variant: str, n: int, repeats: int, rng, bandwidth: int = 30,
            maps=("elu1", "neg_elu1", "tanh"), causal: bool = False, d: int = HEAD_DIM) -> BenchRecord:
    fwd, bwd = _passes(variant, bandwidth, maps, causal)
    q, k, v, g = (rand_matrix(rng, n, d, 1.0) for _ in range(4))
    try:
        fwd_t, bwd_t = [], []
        for _ in range(repeats):
            t0 = time.perf_counter()
            _, saved = fwd(q, k, v)
            t1 = time.perf_counter()
            bwd(saved, g)
            t2 = time.perf_counter()
            del saved
            fwd_t.append(t1 - t0)
            bwd_t.append(t2 - t1)
        tracemalloc.start()
        try:
            _, saved = fwd(q, k, v)
            bwd(saved, g)
            del saved
            _, peak = tracemalloc.get_traced_memory()
        finally:
            tracemalloc.stop()
    except MemoryError:
        return BenchRecord(variant, n, math.nan, math.nan, -1, repeats, feasible=False)
    inputs = q.nbytes + k.nbytes + v.nbytes + g.nbytes
    return BenchRecord(variant, n, float(np.median(fwd_t)), float(np.median(bwd_t)),
                       int(peak + inputs), repeats)


def run_scaling(variants, lengths, repeats: int, rng, progress=None, **kwargs) -> list[BenchRecord]:
    lengths = list(lengths)
    if lengths != sorted(lengths):
        raise ValueError("lengths must be ascending")
    if repeats < 3:
        raise ValueError("repeats must be at least 3")
    records = []
    with threadpool_limits(limits=1):
        for variant in variants:
            for n in lengths:
                rec = measure(variant, n, repeats, rng, **kwargs)
                records.append(rec)
                if progress is not None:
                    progress(rec)
    return records


@dataclass
class SlopeFit:
    variant: str
    time_slope: float
    time_r2: float
    mem_slope: float
    mem_r2: float


def _loglog(x, y):
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    slope, icpt = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + icpt)
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0 else 1 - float((resid ** 2).sum()) / ss_tot
    return float(slope), r2


def fit_slope(records, n_min: int = 0, n_max: int | None = None) -> dict[str, SlopeFit]:
    """Least-squares line through ``log N`` vs ``log fwd_s`` (and peak bytes)
    for each variant, using feasible records inside ``[n_min, n_max]``."""
    by_variant: dict[str, list[BenchRecord]] = {}
    for r in records:
        if r.feasible and r.n >= n_min and (n_max is None or r.n <= n_max):
            by_variant.setdefault(r.variant, []).append(r)
    fits = {}
    for variant, recs in by_variant.items():
        if len({r.n for r in recs}) < 4:
            raise ValueError(f"{variant}: need at least 4 lengths to fit a slope, got {len(recs)}")
        ns = [r.n for r in recs]
        ts, tr2 = _loglog(ns, [r.fwd_s for r in recs])
        ms, mr2 = _loglog(ns, [r.peak_bytes for r in recs])
        fits[variant] = SlopeFit(variant, ts, tr2, ms, mr2)
    return fits


def peak_ratios(records, variant: str, n_min: int = 0) -> list[float]:
    """``peak(2N) / peak(N)`` for consecutive doublings with ``N >= n_min``."""
    peaks = {r.n: r.peak_bytes for r in records if r.variant == variant and r.feasible}
    return [peaks[2 * n] / peaks[n] for n in sorted(peaks) if n >= n_min and 2 * n in peaks]


def write_bench_csv(path, records, meta: dict | None = None) -> None:
    header = {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "machine": platform.machine(),
        "cpus": os.cpu_count(),
        "threads": 1,
        "batch": 1,
        "head_dim": HEAD_DIM,
        "bwd_s": "backward pass alone, after a separate forward",
        "peak_bytes": "tracemalloc peak over forward+backward plus input buffers",
    }
    header.update(meta or {})
    with open(path, "w", newline="") as fh:
        for key, value in header.items():
            fh.write(f"# {key}: {value}\n")
        w = csv.writer(fh)
        w.writerow(["variant", "N", "fwd_s", "bwd_s", "peak_bytes", "repeats"])
        for r in records:
            w.writerow([r.variant, r.n, f"{r.fwd_s:.6g}", f"{r.bwd_s:.6g}", r.peak_bytes, r.repeats])
