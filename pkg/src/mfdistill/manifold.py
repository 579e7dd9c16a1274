"""Patch-level relation maps and the losses built on them.

A relation map is the Gram matrix of L2-normalised feature rows, so its
entries are cosine similarities. The full map over all ``B*N`` patches of a
batch is quadratic in ``B*N``; the decoupled losses replace it with per-image
(``N x N``), per-position (``B x B``) and randomly sampled (``K x K``) maps.
"""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DivergenceError, NumericError, OracleCapError, ShapeError
from .tensor import Tensor

logger = logging.getLogger(__name__)

ORACLE_ROW_CAP = 4096


@dataclass(frozen=True)
class SampleIndices:
    indices: np.ndarray
    seed: Optional[int] = None

    def __len__(self):
        return len(self.indices)


@dataclass(frozen=True)
class MergeSetting:
    rows: int
    cols: int

    def validate(self, grid: Tuple[int, int]):
        h, w = grid
        if not (1 <= self.rows <= h and 1 <= self.cols <= w):
            raise ConfigError(f"merge setting {(self.rows, self.cols)} outside grid {grid}")


def _check_pair(f_s: Tensor, f_t: Tensor):
    if f_s.ndim != 3 or f_t.ndim != 3:
        raise ShapeError(f"features must be (B, N, D); got {f_s.shape} and {f_t.shape}")
    if f_s.shape[:2] != f_t.shape[:2]:
        raise ShapeError(f"student {f_s.shape} and teacher {f_t.shape} differ in (B, N)")


# -- maps ----------------------------------------------------------------------

def relation_map(f: Tensor) -> Tensor:
    """Gram matrix of already-normalised rows ``(R, D) -> (R, R)``."""
    f = T.as_tensor(f)
    if f.ndim != 2:
        raise ShapeError(f"relation_map expects rank 2, got {f.shape}")
    return T.gram(f)


def full_map(f: Tensor, cap: int = ORACLE_ROW_CAP) -> Tensor:
    """The (B*N x B*N) map of a raw (B, N, D) feature batch."""
    f = T.as_tensor(f)
    rows = f.shape[0] * f.shape[1]
    if rows > cap:
        raise OracleCapError(f"full relation map over {rows} rows exceeds the oracle cap of {cap}")
    return T.gram(T.reshape_psi(T.normalize_last_dim(f)))


def intra_maps(f: Tensor) -> Tensor:
    """Per-image maps (B, N, N) of a raw (B, N, D) batch."""
    return T.gram(T.normalize_last_dim(T.as_tensor(f)))


def inter_maps(f: Tensor) -> Tensor:
    """Per-position maps (N, B, B): position j relates patch j across the batch."""
    return T.gram(T.normalize_last_dim(T.as_tensor(f)).transpose(1, 0, 2))


def sampled_map(f: Tensor, indices) -> Tensor:
    rows = T.reshape_psi(T.normalize_last_dim(T.as_tensor(f)))
    return T.gram(T.take_rows(rows, _index_array(indices)))


# -- losses --------------------------------------------------------------------

def full_manifold_loss(f_s, f_t, cap: int = ORACLE_ROW_CAP) -> Tensor:
    """Squared Frobenius gap between the full student and teacher maps.

    This is the reference the decoupled terms are checked against; it refuses
    batches above ``cap`` rows.
    """
    f_s, f_t = T.as_tensor(f_s), T.as_tensor(f_t)
    _check_pair(f_s, f_t)
    return T.frob_sq_diff(full_map(f_s, cap), full_map(f_t, cap))


def intra_loss(f_s, f_t) -> Tensor:
    f_s, f_t = T.as_tensor(f_s), T.as_tensor(f_t)
    _check_pair(f_s, f_t)
    return T.frob_sq_diff(intra_maps(f_s), intra_maps(f_t)) * (1.0 / f_s.shape[0])


def inter_loss(f_s, f_t) -> Tensor:
    f_s, f_t = T.as_tensor(f_s), T.as_tensor(f_t)
    _check_pair(f_s, f_t)
    return T.frob_sq_diff(inter_maps(f_s), inter_maps(f_t)) * (1.0 / f_s.shape[1])


def random_loss(f_s, f_t, indices) -> Tensor:
    """Map gap over K shared sampled rows; no 1/K factor."""
    f_s, f_t = T.as_tensor(f_s), T.as_tensor(f_t)
    _check_pair(f_s, f_t)
    return T.frob_sq_diff(sampled_map(f_s, indices), sampled_map(f_t, indices))


def _index_array(indices) -> np.ndarray:
    return np.asarray(indices.indices if isinstance(indices, SampleIndices) else indices, dtype=np.intp)


def sample_indices(batch: int, patches: int, k: int, rng) -> SampleIndices:
    """Draw ``k`` row indices into the ``batch*patches`` flattened rows.

    Without replacement when ``k`` fits, otherwise with replacement (logged).
    ``rng`` is a ``numpy.random.Generator`` or an integer seed.
    """
    if k < 1:
        raise ConfigError("sample count K must be >= 1")
    seed = rng if isinstance(rng, (int, np.integer)) else None
    gen = np.random.default_rng(rng) if seed is not None else rng
    total = batch * patches
    if k <= total:
        idx = gen.choice(total, size=k, replace=False)
    else:
        logger.warning("K=%d exceeds %d available rows; sampling with replacement", k, total)
        idx = gen.integers(0, total, size=k)
    return SampleIndices(np.asarray(idx, dtype=np.intp), seed)


def decoupled_loss(f_s, f_t, alpha: float, beta: float, gamma: float,
                   indices=None) -> Tuple[Tensor, Dict[str, float]]:
    """``alpha*intra + beta*inter + gamma*random`` plus the unweighted terms.

    Terms with a zero weight are skipped. ``indices`` is required when
    ``gamma > 0``.
    """
    if min(alpha, beta, gamma) < 0:
        raise ConfigError(f"loss weights must be non-negative, got {(alpha, beta, gamma)}")
    f_s, f_t = T.as_tensor(f_s), T.as_tensor(f_t)
    _check_pair(f_s, f_t)
    if gamma and indices is None:
        raise ContractError("random term requested without sample indices")
    parts = decoupled_terms(f_s, f_t, intra=bool(alpha), inter=bool(beta),
                            indices=indices if gamma else None)
    weights = {"intra": alpha, "inter": beta, "random": gamma}
    total = T.Tensor(0.0)
    for name, term in parts.items():
        total = total + term * weights[name]
    return total, {name: term.item() for name, term in parts.items()}


def decoupled_terms(f_s: Tensor, f_t: Tensor, intra=True, inter=True, indices=None) -> Dict[str, Tensor]:
    """Unweighted intra/inter/random terms sharing one normalisation pass.

    A non-finite value raises ``DivergenceError`` naming the offending term.
    """
    b, n = f_s.shape[:2]
    with _term("normalize"):
        ns, nt = T.normalize_last_dim(f_s), T.normalize_last_dim(f_t)
    out = {}
    if intra:
        with _term("intra"):
            out["intra"] = T.frob_sq_diff(T.gram(ns), T.gram(nt)) * (1.0 / b)
    if inter:
        with _term("inter"):
            out["inter"] = T.frob_sq_diff(T.gram(ns.transpose(1, 0, 2)),
                                          T.gram(nt.transpose(1, 0, 2))) * (1.0 / n)
    if indices is not None:
        with _term("random"):
            idx = _index_array(indices)
            rows_s = T.take_rows(T.reshape_psi(ns), idx)
            rows_t = T.take_rows(T.reshape_psi(nt), idx)
            out["random"] = T.frob_sq_diff(T.gram(rows_s), T.gram(rows_t))
    return out


@contextlib.contextmanager
def _term(name: str):
    try:
        yield
    except NumericError as exc:
        raise DivergenceError(f"{name} term: {exc}", term=name) from exc


# -- patch merging ---------------------------------------------------------------

def merge_patches(f, grid: Tuple[int, int], setting) -> Tensor:
    """Merge non-overlapping blocks of adjacent patches into single tokens.

    ``f`` is (B, H*W, D) on an H x W patch grid. The grid is zero-padded up to a
    multiple of the block size ``(ceil(H/H'), ceil(W/W'))``; each block's
    patches are concatenated row-major along the feature axis, giving
    (B, H'*W', bh*bw*D).
    """
    f = T.as_tensor(f)
    h, w = grid
    rows, cols = (setting.rows, setting.cols) if isinstance(setting, MergeSetting) else setting
    if f.ndim != 3 or f.shape[1] != h * w:
        raise ShapeError(f"features {f.shape} do not match patch grid {grid}")
    MergeSetting(rows, cols).validate(grid)
    b, _, d = f.shape
    bh, bw = math.ceil(h / rows), math.ceil(w / cols)
    x = f.reshape(b, h, w, d)
    ph, pw = rows * bh - h, cols * bw - w
    if ph or pw:
        x = T.pad(x, [(0, 0), (0, ph), (0, pw), (0, 0)])
    x = x.reshape(b, rows, bh, cols, bw, d).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, rows * cols, bh * bw * d)
