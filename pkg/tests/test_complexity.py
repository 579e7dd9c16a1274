import json
from pathlib import Path

import numpy as np
import pytest

from mfdistill import complexity as C
from mfdistill.errors import ContractError

GOLDEN = Path(__file__).parent / "golden_costs.json"


def test_unit_case():
    r = C.full_map_cost(1, 1, 1)
    assert (r.flops, r.peak_map_memory_bytes) == (2, 4)


def test_doubling_batch_quadruples_full_cost():
    a, b = C.full_map_cost(3, 5, 7), C.full_map_cost(6, 5, 7)
    assert b.flops == 4 * a.flops and b.peak_map_memory_bytes == 4 * a.peak_map_memory_bytes


def test_reference_setting():
    r = C.audit(128, 196, 192, 192)
    assert r["full"].gflops > 240 and abs(r["full"].gflops - 241.7) < 0.05
    assert abs(r["full"].memory_gb - 2.52) < 0.005
    assert abs(r["decoupled"].gflops - 3.14) < 0.005
    assert abs(r["decoupled"].memory_mb - 32.7) < 0.05
    assert 76 < r["flops_ratio"] < 78


def test_k_zero_drops_the_sampled_map():
    b, n, d = 4, 9, 3
    assert C.decoupled_cost(b, n, d, 0).flops == 2 * (b * n * n * d + b * b * n * d)


def test_counts_are_exact_python_integers():
    r = C.full_map_cost(10 ** 4, 10 ** 3, 10 ** 3)
    assert isinstance(r.flops, int) and r.flops == 2 * 10 ** 17


def test_overflow_and_bad_sizes():
    with pytest.raises(OverflowError):
        C.full_map_cost(10 ** 6, 10 ** 6, 10 ** 3)
    with pytest.raises(ContractError):
        C.decoupled_cost(-1, 2, 3, 4)
    with pytest.raises(ContractError):
        C.full_map_cost(1.5, 2, 3)


def test_golden_counts():
    golden = json.loads(GOLDEN.read_text())
    for row in golden:
        full = C.full_map_cost(row["B"], row["N"], row["D"])
        dec = C.decoupled_cost(row["B"], row["N"], row["D"], row["K"])
        assert [full.flops, full.peak_map_memory_bytes, dec.flops, dec.peak_map_memory_bytes] == row["counts"]


def test_decoupled_cheaper_on_sampled_grid():
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(500):
        b, n, d = (int(v) for v in rng.integers(2, 64, size=3))
        k = int(rng.integers(0, b * n + 1))
        if b * n > b + n + k * k / (b * n):
            assert C.decoupled_cost(b, n, d, k).flops < C.full_map_cost(b, n, d).flops
            checked += 1
    assert checked > 100


def test_format_has_fixed_columns():
    text = C.format_audit(C.audit(128, 196, 192, 192))
    lines = text.splitlines()
    assert lines[1].split() == ["map", "flops", "GFLOPs", "map", "bytes", "MB"]
    assert len(lines[2]) == len(lines[3])
    assert "241692573696" in text and "32661504" in text


def test_bench_reports_flops_and_medians():
    rows = C.bench_losses(4, 16, 8, 16, repetitions=3)
    assert [r["loss"] for r in rows] == ["full", "intra", "inter", "random", "decoupled"]
    assert all(r["seconds"] > 0 for r in rows)
    assert rows[0]["flops"] == C.full_map_cost(4, 16, 8).flops
    assert "median ms" in C.format_bench(rows)


def test_bench_single_repetition():
    assert len(C.bench_losses(2, 4, 3, 4, repetitions=1)) == 5
    with pytest.raises(ContractError):
        C.bench_losses(2, 4, 3, 4, repetitions=0)


def test_bench_drops_full_loss_above_cap():
    rows = C.bench_losses(8, 16, 4, 8, repetitions=1, cap=64)
    assert rows[0]["seconds"] is None and "cap" in rows[0]["note"]
    assert "n/a" in C.format_bench(rows)


def test_decoupled_faster_than_full_in_wall_clock():
    rows = {r["loss"]: r["seconds"] for r in C.bench_losses(8, 64, 32, 64, repetitions=5)}
    assert rows["decoupled"] < rows["full"]
