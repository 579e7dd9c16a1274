import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfdistill import tensor as T
from mfdistill.errors import ContractError, NumericError, ShapeError
from mfdistill.manifold import intra_loss
from mfdistill.tensor import Tensor, backward, grad_check


def rand(*shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


# -- construction -------------------------------------------------------------

def test_rejects_non_finite_on_construction():
    with pytest.raises(NumericError):
        Tensor([1.0, np.nan])
    with pytest.raises(NumericError):
        Tensor([np.inf])


def test_defaults_to_double():
    assert Tensor([1, 2]).data.dtype == np.float64


# -- reshape_psi --------------------------------------------------------------

def test_psi_shapes():
    assert T.reshape_psi(Tensor(np.zeros((2, 3, 4)))).shape == (6, 4)
    x = rand(1, 1, 5)
    out = T.reshape_psi(Tensor(x))
    assert out.shape == (1, 5)
    np.testing.assert_array_equal(out.data[0], x[0, 0])


def test_psi_row_major_order():
    f = Tensor(np.arange(8.0).reshape(2, 2, 2))
    out = T.reshape_psi(f).data
    np.testing.assert_array_equal(out[1], [2, 3])
    np.testing.assert_array_equal(out[2], [4, 5])
    x = rand(2, 3, 4)
    flat = T.reshape_psi(Tensor(x)).data
    for i in range(2):
        for j in range(3):
            np.testing.assert_array_equal(flat[i * 3 + j], x[i, j])


def test_psi_rank_error():
    with pytest.raises(ShapeError):
        T.reshape_psi(Tensor(np.zeros((2, 3))))


def test_psi_keeps_gradient():
    x = Tensor(rand(2, 3, 4), requires_grad=True)
    T.reshape_psi(x).sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


# -- normalize_last_dim -------------------------------------------------------

def test_normalize_3_4_5():
    np.testing.assert_allclose(T.normalize_last_dim(Tensor([3.0, 4.0])).data, [0.6, 0.8])


def test_normalize_zero_row():
    np.testing.assert_array_equal(T.normalize_last_dim(Tensor([[0.0, 0.0]]), 1e-12).data, [[0.0, 0.0]])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4).filter(lambda v: np.linalg.norm(v) > 1e-6))
def test_normalize_unit_norm_and_idempotent(v):
    once = T.normalize_last_dim(Tensor(v))
    assert abs(np.sqrt(np.sum(once.data ** 2)) - 1.0) < 1e-12
    twice = T.normalize_last_dim(once)
    np.testing.assert_allclose(twice.data, once.data, atol=1e-12)


def test_normalize_gradient_for_zero_row_is_finite():
    x = Tensor(np.zeros((2, 3)), requires_grad=True)
    (T.normalize_last_dim(x) * np.arange(6.0).reshape(2, 3)).sum().backward()
    assert np.isfinite(x.grad).all()


# -- gram ---------------------------------------------------------------------

def test_gram_examples():
    np.testing.assert_array_equal(T.gram(Tensor(np.eye(2))).data, np.eye(2))
    np.testing.assert_array_equal(T.gram(Tensor([[1.0, 0.0], [1.0, 0.0]])).data, np.ones((2, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 7), st.integers(1, 6), st.integers(0, 10_000))
def test_gram_exactly_symmetric_and_psd(r, d, seed):
    a = rand(r, d, seed=seed)
    g = T.gram(Tensor(a)).data
    assert np.array_equal(g, g.T)
    assert np.linalg.eigvalsh(g).min() >= -1e-9
    # pairwise dot-product oracle
    for i in range(r):
        for j in range(r):
            assert abs(g[i, j] - sum(a[i, k] * a[j, k] for k in range(d))) < 1e-9


def test_gram_rank_error():
    with pytest.raises(ShapeError):
        T.gram(Tensor(np.zeros(3)))


# -- frob_sq_diff -------------------------------------------------------------

def test_frob_examples():
    a = rand(3, 3)
    assert T.frob_sq_diff(Tensor(a), Tensor(a)).item() == 0.0
    assert T.frob_sq_diff(Tensor(np.eye(2)), Tensor(np.ones((2, 2)))).item() == 2.0
    assert T.frob_sq_diff(Tensor(np.zeros((2, 2))), Tensor(np.ones((2, 2)))).item() == 4.0


def test_frob_shape_error():
    with pytest.raises(ShapeError):
        T.frob_sq_diff(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))


# -- backward -----------------------------------------------------------------

def test_backward_sum():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_quadratic():
    v = rand(3, 2)
    x = Tensor(v, requires_grad=True)
    T.frob_sq_diff(x, np.zeros((3, 2))).backward()
    np.testing.assert_allclose(x.grad, 2 * v)


def test_backward_accumulates():
    x = Tensor(rand(4), requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    first = x.grad.copy()
    loss.backward()
    np.testing.assert_allclose(x.grad, 2 * first)
    x.zero_grad()
    assert x.grad is None


def test_backward_contract_errors():
    x = Tensor(rand(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)
    with pytest.raises(ContractError):
        backward(Tensor(rand(3)).sum())


def test_no_grad_builds_no_graph():
    x = Tensor(rand(3), requires_grad=True)
    with T.no_grad():
        y = (x * x).sum()
    assert not y.requires_grad


def test_intra_loss_gradient_matches_finite_differences():
    f_t = Tensor(rand(2, 3, 4, seed=1))
    err = grad_check(lambda x: intra_loss(x, f_t), rand(2, 3, 4, seed=2), 1e-5)
    assert err < 1e-5


# -- grad_check on every differentiable op ------------------------------------

W = rand(4, 3, seed=7)
PROBE = rand(2, 3, 3, seed=8)

OPS = {
    "sum_sq": (lambda x: (x * x).sum(), (3, 4)),
    "add_broadcast": (lambda x: ((x + rand(4, seed=3)) ** 2).sum(), (3, 4)),
    "sub": (lambda x: ((rand(3, 4, seed=4) - x) ** 2).sum(), (3, 4)),
    "div": (lambda x: (x / (2.0 + x * x)).sum(), (3, 4)),
    "exp_log": (lambda x: T.log(T.exp(x) + 1.0).sum(), (3, 4)),
    "gelu": (lambda x: (T.gelu(x) * rand(3, 4, seed=5)).sum(), (3, 4)),
    "matmul_2d": (lambda x: ((x @ W) ** 2).sum(), (3, 4)),
    "matmul_batched_weight": (lambda x: ((x @ W) ** 2).sum(), (2, 3, 4)),
    "matmul_batched": (lambda x: ((x @ x.transpose(0, 2, 1)) * PROBE).sum(), (2, 3, 4)),
    "mean_axis": (lambda x: (x.mean(axis=1) ** 2).sum(), (3, 4)),
    "transpose_reshape": (lambda x: (x.transpose(1, 0).reshape(2, 6) * rand(2, 6, seed=6)).sum() ** 2, (3, 4)),
    "getitem": (lambda x: (x[1:, ::2] ** 2).sum() + (x[np.array([0, 0, 2]), 1] ** 3).sum(), (3, 4)),
    "concat_pad": (lambda x: (T.pad(T.concat([x, x * 2.0], axis=0), [(1, 0), (0, 2)]) ** 2).sum(), (3, 4)),
    "softmax": (lambda x: (T.softmax(x, axis=-1) * rand(3, 4, seed=9)).sum(), (3, 4)),
    "log_softmax": (lambda x: (T.log_softmax(x, axis=0) * rand(3, 4, seed=10)).sum(), (3, 4)),
    "layer_norm": (lambda x: (T.layer_norm(x, Tensor(rand(4, seed=11)), Tensor(rand(4, seed=12)))
                              * rand(3, 4, seed=13)).sum(), (3, 4)),
    "normalize": (lambda x: (T.normalize_last_dim(x) * rand(3, 4, seed=14)).sum(), (3, 4)),
    "gram": (lambda x: (T.gram(x) * rand(3, 3, seed=15)).sum(), (3, 4)),
    "gram_batched": (lambda x: (T.gram(x) * rand(2, 3, 3, seed=16)).sum(), (2, 3, 4)),
    "frob": (lambda x: T.frob_sq_diff(x, rand(3, 4, seed=17)), (3, 4)),
    "take_rows": (lambda x: (T.take_rows(x, [2, 0, 2]) ** 2).sum(), (3, 4)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    f, shape = OPS[name]
    err = grad_check(f, rand(*shape, seed=zlib.crc32(name.encode()) % 1000), 1e-5)
    assert err < 1e-5, f"{name}: {err}"


def test_layer_norm_parameter_gradients():
    x = rand(2, 3, 4)
    b = Tensor(rand(4, seed=1))
    probe = rand(2, 3, 4, seed=2)
    err = grad_check(lambda w: (T.layer_norm(Tensor(x), w, b) * probe).sum(), rand(4, seed=3))
    assert err < 1e-5


def test_grad_check_exact_quadratic():
    assert grad_check(lambda x: (x * x).sum(), rand(5)) < 1e-9


def test_take_rows_out_of_range():
    with pytest.raises(ContractError):
        T.take_rows(Tensor(np.zeros((3, 2))), [3])


def test_layer_norm_variance_overflow_raises():
    with pytest.raises(NumericError):
        T.layer_norm(Tensor([[1e200, -1e200, 0.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
