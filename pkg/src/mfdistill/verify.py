"""Property suites run at fixed seeds: oracle, gradients, invariants, costs.

Each property reports its measured error next to its tolerance. Loss functions
are looked up on the ``manifold`` module at call time, so a patched
implementation is what gets checked.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List

import numpy as np

from . import complexity as C
from . import manifold as M
from . import objective as O
from . import tensor as T
from .tensor import Tensor

SUITES = ("oracle", "gradients", "invariants", "costs")
ORACLE_TOL = 1e-9
GRAD_TOL = 1e-5
GRAD_STEP = 1e-5


@dataclass
class PropertyResult:
    suite: str
    name: str
    measured: float
    tolerance: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.suite:<11}{self.name:<36}measured={self.measured:<12.3g}tol={self.tolerance:g}" + (
            f"  {self.detail}" if self.detail else "")


def _result(suite, name, measured, tol, strict=False, detail="") -> PropertyResult:
    ok = bool(np.isfinite(measured)) and (measured < tol if strict else measured <= tol)
    return PropertyResult(suite, name, float(measured), tol, ok, detail)


# -- oracle ----------------------------------------------------------------------

def _numpy_full_map(f: np.ndarray) -> np.ndarray:
    rows = f.reshape(-1, f.shape[-1])
    norms = np.sqrt((rows * rows).sum(axis=1, keepdims=True))
    unit = rows / np.maximum(norms, 1e-12)
    return unit @ unit.T


def oracle_errors(triples: int = 100, seed: int = 0) -> Dict[str, float]:
    """Largest deviation of the decoupled maps/losses from slices of the full map."""
    rng = np.random.default_rng(seed)
    worst = {"intra_block_equivalence": 0.0, "inter_block_equivalence": 0.0,
             "random_exhaustive_equivalence": 0.0}
    for _ in range(triples):
        b, n, d = int(rng.integers(1, 9)), int(rng.integers(1, 9)), int(rng.integers(1, 17))
        fs, ft = rng.standard_normal((b, n, d)), rng.standard_normal((b, n, d))
        gs, gt = _numpy_full_map(fs), _numpy_full_map(ft)

        maps = M.intra_maps(Tensor(fs)).data
        blocks_s = np.stack([gs[i * n:(i + 1) * n, i * n:(i + 1) * n] for i in range(b)])
        blocks_t = np.stack([gt[i * n:(i + 1) * n, i * n:(i + 1) * n] for i in range(b)])
        loss = M.intra_loss(Tensor(fs), Tensor(ft)).item()
        ref = ((blocks_s - blocks_t) ** 2).sum() / b
        worst["intra_block_equivalence"] = max(worst["intra_block_equivalence"],
                                               np.abs(maps - blocks_s).max(), abs(loss - ref))

        maps = M.inter_maps(Tensor(fs)).data
        minors_s = np.stack([gs[j::n, j::n] for j in range(n)])
        minors_t = np.stack([gt[j::n, j::n] for j in range(n)])
        loss = M.inter_loss(Tensor(fs), Tensor(ft)).item()
        ref = ((minors_s - minors_t) ** 2).sum() / n
        worst["inter_block_equivalence"] = max(worst["inter_block_equivalence"],
                                               np.abs(maps - minors_s).max(), abs(loss - ref))

        everything = np.arange(b * n)
        loss = M.random_loss(Tensor(fs), Tensor(ft), everything).item()
        full = M.full_manifold_loss(Tensor(fs), Tensor(ft)).item()
        ref = ((gs - gt) ** 2).sum()
        worst["random_exhaustive_equivalence"] = max(worst["random_exhaustive_equivalence"],
                                                     abs(loss - full), abs(loss - ref))
    return worst


def run_oracle(seed: int = 0) -> List[PropertyResult]:
    return [_result("oracle", name, err, ORACLE_TOL) for name, err in oracle_errors(100, seed).items()]


# -- gradients -------------------------------------------------------------------

def gradient_errors(seed: int = 0) -> Dict[str, float]:
    rng = np.random.default_rng(seed)
    b, n, d, classes = 2, 3, 4, 3
    f_t = Tensor(rng.standard_normal((b, n, d)))
    x0 = rng.standard_normal((b, n, d))
    idx = M.sample_indices(b, n, 4, rng)
    t_logits = rng.standard_normal((b, classes))
    labels = rng.integers(0, classes, size=b)
    logits0 = rng.standard_normal((b, classes))
    cut = b * classes

    def total(x: Tensor) -> Tensor:
        logits = x[:cut].reshape(b, classes)
        feats = x[cut:].reshape(b, n, d)
        kd = O.kd_loss(logits, t_logits, labels, 0.5, 2.0)
        mf, _ = M.decoupled_loss(feats, f_t, 4.0, 0.1, 0.2, idx)
        return kd + mf

    cases: Dict[str, Callable[[], float]] = {
        "intra_loss_gradient": lambda: T.grad_check(lambda x: M.intra_loss(x, f_t), x0, GRAD_STEP),
        "inter_loss_gradient": lambda: T.grad_check(lambda x: M.inter_loss(x, f_t), x0, GRAD_STEP),
        "random_loss_gradient": lambda: T.grad_check(lambda x: M.random_loss(x, f_t, idx), x0, GRAD_STEP),
        "kd_loss_gradient": lambda: T.grad_check(lambda x: O.kd_loss(x, t_logits, labels, 0.5, 2.0), logits0,
                                                 GRAD_STEP),
        "total_loss_gradient": lambda: T.grad_check(total, np.concatenate([logits0.ravel(), x0.ravel()]),
                                                    GRAD_STEP),
    }
    return {name: fn() for name, fn in cases.items()}


def run_gradients(seed: int = 0) -> List[PropertyResult]:
    return [_result("gradients", name, err, GRAD_TOL, strict=True)
            for name, err in gradient_errors(seed).items()]


# -- invariants ------------------------------------------------------------------

def _random_orthogonal(d: int, rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def invariant_errors(seed: int = 0) -> Dict[str, float]:
    rng = np.random.default_rng(seed)
    out = {"map_symmetry_unit_diagonal": 0.0, "losses_non_negative": 0.0, "losses_zero_at_equal_features": 0.0,
           "right_orthogonal_invariance": 0.0, "kd_softmax_shift_invariance": 0.0,
           "kd_label_independence_at_lam_1": 0.0}
    for _ in range(20):
        b, n, d = int(rng.integers(1, 6)), int(rng.integers(1, 6)), int(rng.integers(2, 9))
        fs, ft = rng.standard_normal((b, n, d)), rng.standard_normal((b, n, d))
        idx = np.arange(b * n)
        for maps in (M.intra_maps(Tensor(fs)).data, M.inter_maps(Tensor(fs)).data,
                     M.sampled_map(Tensor(fs), idx).data[None]):
            asym = np.abs(maps - maps.transpose(0, 2, 1)).max()
            diag = np.abs(np.diagonal(maps, axis1=1, axis2=2) - 1.0).max()
            out["map_symmetry_unit_diagonal"] = max(out["map_symmetry_unit_diagonal"], asym, diag)

        losses = {
            "intra": lambda a, c: M.intra_loss(Tensor(a), Tensor(c)).item(),
            "inter": lambda a, c: M.inter_loss(Tensor(a), Tensor(c)).item(),
            "random": lambda a, c: M.random_loss(Tensor(a), Tensor(c), idx).item(),
        }
        q = _random_orthogonal(d, rng)
        for fn in losses.values():
            out["losses_non_negative"] = max(out["losses_non_negative"], max(0.0, -fn(fs, ft)))
            out["losses_zero_at_equal_features"] = max(out["losses_zero_at_equal_features"], abs(fn(fs, fs)))
            out["right_orthogonal_invariance"] = max(out["right_orthogonal_invariance"],
                                                     abs(fn(fs @ q, ft @ q) - fn(fs, ft)))

        classes = int(rng.integers(2, 6))
        s_logits, t_logits = rng.standard_normal((b, classes)), rng.standard_normal((b, classes))
        labels = rng.integers(0, classes, size=b)
        shift = float(rng.uniform(-50, 50))
        for lam in (0.0, 0.5, 1.0):
            base = O.kd_loss(Tensor(s_logits), t_logits, labels, lam, 2.0).item()
            moved = O.kd_loss(Tensor(s_logits + shift), t_logits + shift, labels, lam, 2.0).item()
            out["kd_softmax_shift_invariance"] = max(out["kd_softmax_shift_invariance"], abs(base - moved))
        relabelled = (labels + 1) % classes
        a = O.kd_loss(Tensor(s_logits), t_logits, labels, 1.0, 2.0).item()
        c = O.kd_loss(Tensor(s_logits), t_logits, relabelled, 1.0, 2.0).item()
        out["kd_label_independence_at_lam_1"] = max(out["kd_label_independence_at_lam_1"], abs(a - c))
    return out


def run_invariants(seed: int = 0) -> List[PropertyResult]:
    errs = invariant_errors(seed)
    return [_result("invariants", name, err, 0.0 if name == "kd_label_independence_at_lam_1" else ORACLE_TOL)
            for name, err in errs.items()]


# -- costs -----------------------------------------------------------------------

# Exact counts for B=128, N=196, D=192, K=192, 4-byte elements.
FROZEN = {
    "full_flops": 241_692_573_696,
    "full_bytes": 2_517_630_976,
    "decoupled_flops": 3_135_504_384,
    "decoupled_bytes": 32_661_504,
}


def run_costs(seed: int = 0) -> List[PropertyResult]:
    r = C.audit(128, 196, 192, 192, 4)
    full, dec = r["full"], r["decoupled"]
    exact = {
        "full_flops": full.flops, "full_bytes": full.peak_map_memory_bytes,
        "decoupled_flops": dec.flops, "decoupled_bytes": dec.peak_map_memory_bytes,
    }
    out = [_result("costs", f"exact_{k}", abs(v - FROZEN[k]), 0) for k, v in exact.items()]
    # rounded headline figures: >240 GFLOPs, 2.5 GB, 3 GFLOPs, 32 MB
    out.append(_result("costs", "full_exceeds_240_gflops", max(0.0, 240.0 - full.gflops), 0.0,
                       detail=f"{full.gflops:.1f} GFLOPs"))
    out.append(_result("costs", "full_memory_2.5_gb", abs(round(full.memory_gb, 1) - 2.5), 0.0,
                       detail=f"{full.memory_gb:.2f} GB"))
    out.append(_result("costs", "decoupled_3_gflops", abs(round(dec.gflops) - 3), 0.0,
                       detail=f"{dec.gflops:.2f} GFLOPs"))
    out.append(_result("costs", "decoupled_memory_32_mb", abs(int(dec.memory_mb) - 32), 0.0,
                       detail=f"{dec.memory_mb:.1f} MB"))
    out.append(_result("costs", "two_orders_of_magnitude", abs(round(np.log10(r["flops_ratio"])) - 2), 0.0,
                       detail=f"ratio {r['flops_ratio']:.1f}x"))
    return out


RUNNERS = {"oracle": run_oracle, "gradients": run_gradients, "invariants": run_invariants, "costs": run_costs}


def verify(suites: Iterable[str] = SUITES, seed: int = 0) -> List[PropertyResult]:
    results: List[PropertyResult] = []
    for name in suites:
        if name not in RUNNERS:
            raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")
        results.extend(RUNNERS[name](seed))
    return results


def format_report(results: List[PropertyResult]) -> str:
    failed = sum(not r.passed for r in results)
    lines = [r.line() for r in results]
    lines.append(f"{len(results) - failed}/{len(results)} properties passed")
    return "\n".join(lines)
