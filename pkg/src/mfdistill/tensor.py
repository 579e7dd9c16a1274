"""Minimal dense tensor with dynamic reverse-mode differentiation.

Only the operations needed by the relation-map losses and the toy vision
transformer are provided. Every op records a closure that maps the output
gradient to input gradients; :func:`backward` walks the recorded graph in
reverse topological order and accumulates into leaf ``grad`` buffers.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

DEFAULT_DTYPE = np.float64
NORM_EPS = 1e-12

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class GradRecord:
    """Backward bookkeeping for one op: its name, inputs and a vjp closure."""

    __slots__ = ("op", "inputs", "vjp")

    def __init__(self, op: str, inputs: Sequence["Tensor"], vjp: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self.vjp = vjp


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, _record: Optional[GradRecord] = None):
        arr = np.asarray(data, dtype=dtype or (data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE))
        if not np.isfinite(arr).all():
            op = _record.op if _record is not None else "construction"
            raise NumericError(f"non-finite values produced by {op}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._record = _record

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._record is None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no graph records inside the block (evaluation, teacher forwards)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _make(data, inputs, op, vjp) -> Tensor:
    track = _grad_enabled and any(t.requires_grad for t in inputs)
    record = GradRecord(op, inputs, vjp) if track else None
    return Tensor(data, requires_grad=track, dtype=data.dtype if isinstance(data, np.ndarray) else None, _record=record)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b), "mul",
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), "div", vjp)


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    return _make(out, (a,), "pow", lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    from scipy.special import erf  # deferred: scipy.special costs ~0.3 s to import

    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT_2))

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(x * cdf, (a,), "gelu", vjp)


# -- reductions and shape ------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), "sum", vjp)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _make(out, (a,), "transpose", lambda g: (np.transpose(g, inverse),))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    basic = not any(isinstance(i, (np.ndarray, list)) for i in (index if isinstance(index, tuple) else (index,)))

    def vjp(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (a,), "getitem", vjp)


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather rows of a rank-2 tensor (repeated indices allowed)."""
    if a.ndim != 2:
        raise ShapeError(f"take_rows expects rank 2, got shape {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ContractError(f"row index out of range [0, {a.shape[0]})")
    return getitem(a, idx)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(out, tensors, "concat", vjp)


def pad(a: Tensor, widths) -> Tensor:
    """Zero-pad; ``widths`` is a per-axis list of (before, after)."""
    out = np.pad(a.data, widths)
    slices = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _make(out, (a,), "pad", lambda g: (g[slices],))


# -- linear algebra ------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.matmul(a.data, b.data)

    def vjp(g):
        if b.ndim == 2 and a.ndim > 2:
            k, m = b.shape
            ga = g @ b.data.T
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
            return ga, gb
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), "matmul", vjp)


def _mirror_upper(m: np.ndarray) -> np.ndarray:
    upper = np.triu(m)
    return upper + np.swapaxes(np.triu(m, 1), -1, -2)


def gram(a: Tensor) -> Tensor:
    """Row Gram matrix ``A Aᵀ`` with bit-exact symmetry.

    Accepts rank 2 ``(R, D)``; a leading batch axis ``(G, R, D)`` gives a stack
    of ``G`` Gram matrices.
    """
    if a.ndim not in (2, 3):
        raise ShapeError(f"gram expects rank 2 (or batched rank 3), got shape {a.shape}")
    x = a.data
    out = _mirror_upper(np.matmul(x, np.swapaxes(x, -1, -2)))

    def vjp(g):
        return (np.matmul(g + np.swapaxes(g, -1, -2), x),)

    return _make(out, (a,), "gram", vjp)


def frob_sq_diff(a, b) -> Tensor:
    """Sum of squared elementwise differences."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"frob_sq_diff shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = np.asarray(np.dot(diff.ravel(), diff.ravel()))
    return _make(out, (a, b), "frob_sq_diff", lambda g: (2.0 * g * diff, -2.0 * g * diff))


# -- normalisation -------------------------------------------------------

def reshape_psi(f: Tensor) -> Tensor:
    """Flatten the first two axes: ``(D1, D2, D3) -> (D1*D2, D3)``."""
    if f.ndim != 3:
        raise ShapeError(f"reshape_psi expects rank 3, got shape {f.shape}")
    d1, d2, d3 = f.shape
    return reshape(f, (d1 * d2, d3))


def normalize_last_dim(f: Tensor, epsilon: float = NORM_EPS) -> Tensor:
    """Divide each last-axis slice by ``max(||slice||_2, epsilon)``."""
    if f.ndim < 1:
        raise ShapeError("normalize_last_dim needs rank >= 1")
    x = f.data
    # rescale by the largest entry so squaring cannot overflow or underflow
    scale = np.abs(x).max(axis=-1, keepdims=True) if x.shape[-1] else np.zeros(x.shape[:-1] + (1,))
    safe = np.where(scale > 0, scale, 1.0)
    r = x / safe
    norm = safe * np.sqrt(np.einsum("...i,...i->...", r, r))[..., None]
    clipped = norm <= epsilon
    denom = np.where(clipped, epsilon, norm)
    y = x / denom

    def vjp(g):
        radial = np.einsum("...i,...i->...", y, g)[..., None]
        return (np.where(clipped, g, g - y * radial) / denom,)

    return _make(y, (f,), "normalize", vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), "softmax", vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), "log_softmax", vjp)


def layer_norm(a: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    with np.errstate(over="ignore"):
        var = (xc * xc).mean(axis=-1, keepdims=True)
    if not np.isfinite(var).all():
        raise NumericError("layer_norm: activation variance overflowed")
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * weight.data + bias.data

    def vjp(g):
        gw = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        gb = g.reshape(-1, x.shape[-1]).sum(axis=0)
        gx_hat = g * weight.data
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gw, gb

    return _make(out, (a, weight, bias), "layer_norm", vjp)


# -- graph traversal -----------------------------------------------------

def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._record is not None:
            for parent in node._record.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Gradients add into existing buffers; call ``zero_grad`` to reset.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward called on a tensor with no tracked inputs")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._record is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._record.inputs, node._record.vjp(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def grad_check(f: Callable[[Tensor], Tensor], x0, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps one tensor to a scalar tensor. The relative error per element is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    base = np.array(x0.data if isinstance(x0, Tensor) else x0, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    y = f(x)
    if not np.isfinite(y.data).all():
        raise NumericError("f(x0) is not finite")
    backward(y)
    analytic = x.grad.ravel()
    numeric = np.empty_like(analytic)
    flat = base.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(Tensor(base.copy())).item()
        flat[i] = orig - step
        lo = f(Tensor(base.copy())).item()
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * step)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / scale))
