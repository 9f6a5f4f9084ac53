"""Latency scaling of the scan, graph encoder and feature extraction."""

from __future__ import annotations

import gc
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .encoder import ChebEncoder, encode
from .features import rpsd

COMPONENTS = ("scan", "gcn", "features")
CSV_HEADER = ("component", "seq_len", "repeats", "median_ms", "ratio")


@dataclass
class BenchRow:
    component: str
    seq_len: int
    repeats: int
    median_ms: float
    ratio: float | None  # median relative to the previous (shorter) length


def _time_once(fn: Callable[[], object]) -> float:
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def _interleaved_medians(fns: Sequence[Callable[[], object]], repeats: int) -> list[float]:
    """Median milliseconds per case, with the cases alternated inside every repeat.

    Alternating keeps slow drift in machine load from biasing one length
    against another; the garbage collector is paused while timing.
    """
    for fn in fns:
        fn()  # warm-up
    times = [[] for _ in fns]
    enabled = gc.isenabled()
    gc.disable()
    try:
        for r in range(repeats):
            order = range(len(fns)) if r % 2 == 0 else reversed(range(len(fns)))
            for i in order:
                times[i].append(_time_once(fns[i]))
    finally:
        if enabled:
            gc.enable()
    return [float(np.median(t)) * 1e3 for t in times]


def scan_case(n: int, rng: np.random.Generator, d_inner: int = 64, d_state: int = 16):
    u = T.Tensor(rng.standard_normal((1, n, d_inner)))
    delta = T.Tensor(rng.uniform(1e-3, 0.1, (1, n, d_inner)))
    A = T.Tensor(-np.tile(np.arange(1, d_state + 1, dtype=float), (d_inner, 1)))
    B = T.Tensor(rng.standard_normal((1, n, d_state)))
    C = T.Tensor(rng.standard_normal((1, n, d_state)))
    D = T.Tensor(np.ones(d_inner))
    return lambda: T.selective_scan(u, delta, A, B, C, D)


def gcn_case(n: int, rng: np.random.Generator, channels: int = 16, hidden: int = 32):
    enc = ChebEncoder.init(7, hidden, channels, 3, 2, rng)
    A = rng.uniform(0, 1, (channels, channels))
    A = (A + A.T) / 2
    np.fill_diagonal(A, 0)
    Lt = T.scaled_laplacian(T.Tensor(A))
    F = T.Tensor(rng.dirichlet(np.ones(7), size=(n, channels)))
    return lambda: encode(F, enc, Lt)


def features_case(n: int, rng: np.random.Generator, channels: int = 16, fs: float = 128.0, seconds: float = 4.0):
    subs = rng.standard_normal((n, channels, int(seconds * fs)))
    return lambda: rpsd(subs, fs)


CASES = {"scan": scan_case, "gcn": gcn_case, "features": features_case}


def run_bench(seq_lengths: Sequence[int], repeats: int, components: Sequence[str] = COMPONENTS,
              seed: int = 0) -> list[BenchRow]:
    rows = []
    lengths = sorted(seq_lengths)
    for comp in components:
        if comp not in CASES:
            raise ValueError(f"unknown component {comp!r}; choose from {COMPONENTS}")
        fns = [CASES[comp](n, np.random.default_rng(seed)) for n in lengths]
        medians = _interleaved_medians(fns, repeats)
        for i, (n, ms) in enumerate(zip(lengths, medians)):
            rows.append(BenchRow(comp, n, repeats, ms, None if i == 0 else ms / medians[i - 1]))
    return rows


def scan_linearity(rows: Sequence[BenchRow]) -> float | None:
    """Ratio of the two longest scan timings."""
    scan = [r for r in rows if r.component == "scan"]
    return scan[-1].ratio if len(scan) >= 2 else None
