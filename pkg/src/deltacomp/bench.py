"""Fused-versus-materialized apply benchmark.

The scenario is multi-model serving: the dense delta of a requested model
is not cached, so the materialized baseline pays decompress-then-multiply
on every call while the fused path works directly on the packed factors.
Timing runs plain; the allocation high-water mark is measured in a
separate tracemalloc pass (numpy registers its buffers there), which is
how "the fused path never materializes an h_out x h_in buffer" is
enforced.
"""

import time
import tracemalloc

import numpy as np

from .errors import NumericsError
from .numerics import Rng, gaussian_matrix
from .pipeline import CompressedGroup, CompressedMatrix, decompress_matrix, fused_apply
from .planner import make_schedule
from .quantizers import rtn_quantize, sign_quantize
from dataclasses import dataclass

__all__ = ["BenchRow", "run_bench", "synthetic_compressed_matrix"]


@dataclass(frozen=True)
class BenchRow:
    impl: str  # "fused" or "materialized"
    batch: int
    hidden: int
    seconds: float
    peak_bytes: int
    rel_err: float
    speedup: float  # materialized time / fused time for this (batch, hidden)


def synthetic_compressed_matrix(
    hidden: int,
    alpha: float = 1.0 / 16.0,
    spec: str = "8+3+2",
    seed: int = 0,
    group_size: int = 128,
) -> CompressedMatrix:
    """Build a hidden x hidden compressed matrix directly from random factors.

    Skips the SVD/calibration path (RTN on the factor slices) so large
    benchmark sizes stay cheap to set up; the apply paths under test are
    exercised identically.
    """
    schedule = make_schedule(spec, alpha, hidden, hidden)
    r = schedule.total_ranks
    rng = Rng.stream(seed, f"bench/{hidden}")
    scale = 1.0 / np.sqrt(hidden)
    u = gaussian_matrix(rng, hidden, r) * scale
    vt = gaussian_matrix(rng, r, hidden) * scale
    sigma = np.sqrt(hidden) * np.power(
        np.arange(1, r + 1, dtype=np.float64), -1.2
    )

    groups = []
    for g in schedule.groups:
        u_slice = np.ascontiguousarray(u[:, g.r_begin : g.r_end])
        vt_slice = np.ascontiguousarray(vt[g.r_begin : g.r_end])
        if g.bits == 16:
            u_payload, v_payload = u_slice.astype(np.float16), vt_slice.astype(np.float16)
        elif g.bits == 1:
            u_payload = sign_quantize(u_slice, f16_grid=True)
            v_payload = sign_quantize(vt_slice, f16_grid=True)
        else:
            u_payload = rtn_quantize(u_slice, g.bits, group_size, f16_grid=True)
            v_payload = rtn_quantize(vt_slice, g.bits, group_size, f16_grid=True)
        groups.append(
            CompressedGroup(g.bits, g.r_begin, g.r_end, group_size, u_payload, v_payload)
        )
    return CompressedMatrix(
        h_out=hidden,
        h_in=hidden,
        sigma=sigma.astype(np.float16),
        groups=tuple(groups),
        schedule=schedule,
    )


def _time(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _peak_bytes(fn) -> int:
    tracemalloc.start()
    tracemalloc.reset_peak()
    fn()
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    return peak


def run_bench(
    hidden_sizes=(1024, 2048, 4096),
    batch_sizes=(1, 8, 32),
    repeats: int = 2,
    seed: int = 0,
    alpha: float = 1.0 / 16.0,
    spec: str = "8+3+2",
    check_memory: bool = True,
) -> list[BenchRow]:
    """Sweep (hidden, batch) points; assert equivalence and memory bounds.

    Each point checks that fused and materialized outputs agree within
    1e-4 relative L2 and (optionally) that the fused pass's allocation
    peak stays below one h_out x h_in float32 buffer while the
    materialized pass necessarily exceeds it.
    """
    rows = []
    for hidden in hidden_sizes:
        cm = synthetic_compressed_matrix(hidden, alpha=alpha, spec=spec, seed=seed)
        dense_bytes = hidden * hidden * 4
        for batch in batch_sizes:
            x = gaussian_matrix(Rng.stream(seed, f"bench/x/{hidden}/{batch}"), hidden, batch)

            fused_out = fused_apply(cm, x)
            materialized_out = decompress_matrix(cm) @ x
            denom = float(np.linalg.norm(materialized_out))
            rel_err = (
                float(np.linalg.norm(fused_out - materialized_out)) / denom
                if denom
                else float(np.linalg.norm(fused_out))
            )
            if rel_err > 1e-4:
                raise NumericsError(
                    f"fused/materialized divergence {rel_err:.2e} at "
                    f"hidden={hidden} batch={batch}"
                )

            t_fused = _time(lambda: fused_apply(cm, x), repeats)
            t_mat = _time(lambda: decompress_matrix(cm) @ x, repeats)
            peak_fused = _peak_bytes(lambda: fused_apply(cm, x))
            peak_mat = _peak_bytes(lambda: decompress_matrix(cm) @ x)
            if check_memory:
                if peak_fused >= dense_bytes:
                    raise NumericsError(
                        f"fused apply peak {peak_fused} bytes reached a dense "
                        f"{hidden}x{hidden} buffer ({dense_bytes} bytes)"
                    )
                if peak_mat < dense_bytes:
                    raise NumericsError(
                        f"materialized peak {peak_mat} bytes below a dense "
                        f"buffer; instrumentation is broken"
                    )
            speedup = t_mat / t_fused if t_fused > 0 else float("inf")
            rows.append(BenchRow("fused", batch, hidden, t_fused, peak_fused, rel_err, speedup))
            rows.append(BenchRow("materialized", batch, hidden, t_mat, peak_mat, rel_err, speedup))
    return rows
