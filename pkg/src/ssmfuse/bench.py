"""Wall-clock timing of the scan implementations across sequence lengths."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import ssm
from . import tensor as T
from .errors import ValidationError
from .tensor import Tensor

METHODS = ("sequential", "chunked", "fused")


def _inputs(rng: np.random.Generator, L: int, batch: int, d_model: int, d_state: int):
    A = Tensor(-np.exp(rng.normal(scale=0.5, size=(d_model, d_state))))
    B = Tensor(rng.normal(size=(batch, L, d_state)))
    C = Tensor(rng.normal(size=(batch, L, d_state)))
    delta = Tensor(rng.uniform(1e-3, 1e-1, size=(batch, L, d_model)))
    x = Tensor(rng.normal(size=(batch, L, d_model)))
    return A, B, C, delta, x


def _runner(method: str, chunk: int) -> tuple[Callable, Callable]:
    """(prepare, run) for one method. Only ``run`` is timed.

    The reference scans take an already-discretized pair, so discretization
    happens in ``prepare``. The fused kernel discretizes inside the scan and
    is timed whole.
    """
    if method == "sequential":
        return (lambda A, B, C, dl, x: (ssm.zoh_discretize(A, B, dl), C, x)), ssm.scan_sequential
    if method == "chunked":
        return ((lambda A, B, C, dl, x: (ssm.zoh_discretize(A, B, dl), C, x)),
                lambda pair, C, x: ssm.scan_chunked(pair, C, x, chunk))
    if method == "fused":
        return (lambda *args: args), ssm.selective_scan
    raise ValidationError(f"unknown bench method {method!r}; choose from {METHODS}")


def time_scans(method: str, lengths, *, repeats: int = 5, batch: int = 1, d_model: int = 16, d_state: int = 16,
               chunk: int = 64, seed: int = 0) -> dict[int, float]:
    """Median forward time (seconds) per length over ``repeats`` runs.

    Each repetition times every length once, so slow drift in machine load
    spreads over all lengths instead of landing on one of them.
    """
    prepare, run = _runner(method, chunk)
    with T.no_grad():
        args = {L: prepare(*_inputs(np.random.default_rng([seed, L]), L, batch, d_model, d_state)) for L in lengths}
        times: dict[int, list[float]] = {L: [] for L in lengths}
        for L in lengths:
            run(*args[L])  # warm caches and any JIT compilation
        for _ in range(repeats):
            for L in lengths:
                t0 = time.perf_counter()
                run(*args[L])
                times[L].append(time.perf_counter() - t0)
    return {L: float(np.median(ts)) for L, ts in times.items()}


def time_scan(method: str, L: int, **kw) -> float:
    """Median forward time (seconds) of one length; see :func:`time_scans`."""
    return time_scans(method, [L], **kw)[L]


def run_bench(lengths, methods=("sequential",), repeats: int = 5, seed: int = 0, **kw) -> list[dict]:
    """One row per (method, length) with the median time and the ratio to the
    previous length in the list."""
    lengths = [int(n) for n in lengths]
    if not lengths or min(lengths) < 1:
        raise ValidationError("lengths must be positive integers")
    rows = []
    for method in methods:
        medians = time_scans(method, lengths, repeats=repeats, seed=seed, **kw)
        prev = None
        for L in lengths:
            t = medians[L]
            rows.append({"method": method, "length": L, "median_s": t,
                         "ratio_vs_prev": (t / prev[1]) if prev else float("nan"),
                         "length_ratio": (L / prev[0]) if prev else float("nan")})
            prev = (L, t)
    return rows


BENCH_FIELDS = ("method", "length", "median_s", "ratio_vs_prev", "length_ratio")
