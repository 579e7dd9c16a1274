"""Analytical cost of relation-map losses and a small wall-clock benchmark.

FLOPs count a multiply-add as two operations. Memory covers relation-map
storage only.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional

import numpy as np

from . import manifold as M
from .errors import ContractError
from .tensor import Tensor

COUNT_LIMIT = 2 ** 63 - 1


@dataclass(frozen=True)
class CostReport:
    kind: str
    flops: int
    peak_map_memory_bytes: int
    B: int
    N: int
    D: int
    K: int
    bytes_per_elem: int

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    @property
    def memory_gb(self) -> float:
        return self.peak_map_memory_bytes / 1e9

    @property
    def memory_mb(self) -> float:
        return self.peak_map_memory_bytes / 1e6

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(gflops=self.gflops, memory_mb=self.memory_mb)
        return d


def _check(**sizes):
    for name, value in sizes.items():
        if not isinstance(value, (int, np.integer)) or value < 0:
            raise ContractError(f"{name} must be a non-negative integer, got {value!r}")


def _bounded(value: int) -> int:
    if value > COUNT_LIMIT:
        raise OverflowError(f"count {value} exceeds the 64-bit range")
    return int(value)


def full_map_cost(B: int, N: int, D: int, bytes_per_elem: int = 4) -> CostReport:
    """Cost of one (BN x BN) map: ``2*B^2*N^2*D`` FLOPs, ``B^2*N^2`` elements."""
    _check(B=B, N=N, D=D, bytes_per_elem=bytes_per_elem)
    flops = 2 * B * B * N * N * D
    mem = B * B * N * N * bytes_per_elem
    return CostReport("full", _bounded(flops), _bounded(mem), B, N, D, 0, bytes_per_elem)


def decoupled_cost(B: int, N: int, D: int, K: int, bytes_per_elem: int = 4) -> CostReport:
    """Cost of the intra, inter and sampled maps together.

    ``2*(B*N^2*D + B^2*N*D + K^2*D)`` FLOPs and ``B*N^2 + N*B^2 + K^2`` elements;
    ``K=0`` drops the sampled map.
    """
    _check(B=B, N=N, D=D, K=K, bytes_per_elem=bytes_per_elem)
    flops = 2 * (B * N * N * D + B * B * N * D + K * K * D)
    mem = (B * N * N + N * B * B + K * K) * bytes_per_elem
    return CostReport("decoupled", _bounded(flops), _bounded(mem), B, N, D, K, bytes_per_elem)


def audit(B: int, N: int, D: int, K: int, bytes_per_elem: int = 4) -> Dict[str, object]:
    full = full_map_cost(B, N, D, bytes_per_elem)
    dec = decoupled_cost(B, N, D, K, bytes_per_elem)
    return {
        "full": full,
        "decoupled": dec,
        "flops_ratio": full.flops / dec.flops,
        "memory_ratio": full.peak_map_memory_bytes / dec.peak_map_memory_bytes,
    }


def format_audit(result: Dict[str, object]) -> str:
    full, dec = result["full"], result["decoupled"]
    lines = [
        f"B={full.B} N={full.N} D={full.D} K={dec.K} bytes/elem={full.bytes_per_elem}",
        f"{'map':<10}{'flops':>18}{'GFLOPs':>12}{'map bytes':>18}{'MB':>12}",
    ]
    for r in (full, dec):
        lines.append(f"{r.kind:<10}{r.flops:>18d}{r.gflops:>12.3f}{r.peak_map_memory_bytes:>18d}{r.memory_mb:>12.3f}")
    lines.append(f"{'ratio':<10}{result['flops_ratio']:>18.2f}{'':>12}{result['memory_ratio']:>18.2f}")
    return "\n".join(lines)


def audit_to_dict(result: Dict[str, object]) -> dict:
    return {
        "full": result["full"].to_dict(),
        "decoupled": result["decoupled"].to_dict(),
        "flops_ratio": result["flops_ratio"],
        "memory_ratio": result["memory_ratio"],
    }


# -- wall clock ------------------------------------------------------------------

def _time(fn, repetitions: int) -> float:
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return samples[0] if repetitions == 1 else statistics.median(samples)


def bench_losses(B: int, N: int, D: int, K: int, repetitions: int = 5, seed: int = 0,
                 cap: int = M.ORACLE_ROW_CAP) -> List[dict]:
    """Median forward wall-clock of each loss next to its analytical FLOPs.

    The full-map row is dropped (with a note) when ``B*N`` exceeds ``cap``.
    """
    if repetitions < 1:
        raise ContractError("repetitions must be >= 1")
    rng = np.random.default_rng(seed)
    f_s = Tensor(rng.standard_normal((B, N, D)))
    f_t = Tensor(rng.standard_normal((B, N, D)))
    idx = M.sample_indices(B, N, K, rng)
    full = full_map_cost(B, N, D)
    rows = []
    try:
        import threadpoolctl
        limiter = threadpoolctl.threadpool_limits(1)
    except ImportError:  # pragma: no cover
        limiter = None
    try:
        if B * N <= cap:
            rows.append({"loss": "full", "seconds": _time(lambda: M.full_manifold_loss(f_s, f_t, cap), repetitions),
                         "flops": full.flops})
        else:
            rows.append({"loss": "full", "seconds": None, "flops": full.flops,
                         "note": f"skipped: B*N={B * N} exceeds oracle cap {cap}"})
        rows.append({"loss": "intra", "seconds": _time(lambda: M.intra_loss(f_s, f_t), repetitions),
                     "flops": 2 * B * N * N * D})
        rows.append({"loss": "inter", "seconds": _time(lambda: M.inter_loss(f_s, f_t), repetitions),
                     "flops": 2 * B * B * N * D})
        rows.append({"loss": "random", "seconds": _time(lambda: M.random_loss(f_s, f_t, idx), repetitions),
                     "flops": 2 * K * K * D})
        rows.append({"loss": "decoupled",
                     "seconds": _time(lambda: M.decoupled_loss(f_s, f_t, 1.0, 1.0, 1.0, idx), repetitions),
                     "flops": decoupled_cost(B, N, D, K).flops})
    finally:
        if limiter is not None:
            limiter.unregister()
    return rows


def format_bench(rows: List[dict]) -> str:
    lines = [f"{'loss':<11}{'median ms':>12}{'flops':>16}"]
    for r in rows:
        t = "n/a" if r["seconds"] is None else f"{r['seconds'] * 1e3:.3f}"
        line = f"{r['loss']:<11}{t:>12}{r['flops']:>16d}"
        if "note" in r:
            line += f"  ({r['note']})"
        lines.append(line)
    return "\n".join(lines)
