import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from matevit import numerics as nx
from matevit.errors import EmptyTargetError, NumericError, ShapeError
from matevit.numerics import Tensor

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def t64(x, grad=True):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# -- tensor bookkeeping ---------------------------------------------------------

def test_grad_matches_data_shape():
    x = t64(np.ones((3, 2)))
    (x * 2.0).sum().backward()
    assert x.grad.shape == x.data.shape
    assert x.data.size == 6


def test_two_backward_passes_double_the_grad():
    x = t64([1.0, 2.0])
    (x * x).sum().backward()
    first = x.grad.copy()
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, 2 * first)


def test_no_grad_records_nothing():
    x = t64([1.0])
    with nx.no_grad():
        y = x * 3.0
    assert y._parents == ()


def test_rng_same_seed_same_stream():
    a = nx.make_rng(42).standard_normal(100)
    b = nx.make_rng(42).standard_normal(100)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, nx.make_rng(43).standard_normal(100))


# -- matmul ---------------------------------------------------------------------

def test_matmul_hand_case():
    out = nx.matmul(t64([[1, 2], [3, 4]]), t64([[1], [1]]))
    np.testing.assert_array_equal(out.data, [[3], [7]])


@given(arrays(np.float64, (3, 4), elements=finite))
def test_matmul_identity_and_zero(a):
    np.testing.assert_array_equal(nx.matmul(t64(a), t64(np.eye(4))).data, a)
    np.testing.assert_array_equal(nx.matmul(t64(a), t64(np.zeros((4, 2)))).data, np.zeros((3, 2)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


# -- softmax ----------------------------------------------------------------------

def test_softmax_examples():
    np.testing.assert_allclose(nx.softmax_rows(t64([[0.0, 0.0]])).data, [[0.5, 0.5]])
    np.testing.assert_allclose(nx.softmax_rows(t64([[math.log(2), 0.0]])).data, [[2 / 3, 1 / 3]])
    out = nx.softmax_rows(t64([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[1.0, 0.0]])


def test_softmax_rejects_nan():
    with pytest.raises(NumericError):
        nx.softmax_rows(t64([[np.nan, 0.0]]))


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
              elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    p = nx.softmax_rows(t64(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)


# -- layer norm -------------------------------------------------------------------

def test_layer_norm_examples():
    ones, zeros = t64([1.0, 1.0]), t64([0.0, 0.0])
    np.testing.assert_allclose(nx.layer_norm(t64([[1.0, 3.0]]), ones, zeros, eps=1e-12).data,
                               [[-1.0, 1.0]], atol=1e-9)
    beta = t64([0.3, -0.7])
    np.testing.assert_allclose(nx.layer_norm(t64([[5.0, 5.0]]), ones, beta).data, [[0.3, -0.7]])
    x = t64(np.random.default_rng(0).normal(size=(4, 2)))
    np.testing.assert_allclose(nx.layer_norm(x, zeros, beta).data, np.tile([0.3, -0.7], (4, 1)))


# -- gelu / softplus / cdf ----------------------------------------------------------

def test_gelu_examples():
    assert nx.gelu(t64([0.0])).data[0] == 0.0
    oracle = 3.0 * 0.5 * (1.0 + math.erf(3.0 / math.sqrt(2.0)))
    assert nx.gelu(t64([3.0])).data[0] == pytest.approx(oracle, abs=1e-12)
    assert nx.gelu(t64([3.0])).data[0] == pytest.approx(2.99595, abs=1e-5)
    assert abs(nx.gelu(t64([-10.0])).data[0]) < 1e-6


def test_softplus_at_zero_is_ln2():
    assert nx.softplus(t64([0.0])).data[0] == pytest.approx(math.log(2.0))


# -- gather / scatter -----------------------------------------------------------------

def test_gather_rows_examples():
    x = t64(np.arange(6.0).reshape(3, 2))
    np.testing.assert_array_equal(nx.gather_rows(x, [0, 1, 2]).data, x.data)
    np.testing.assert_array_equal(nx.gather_rows(x, [2, 0]).data, [[4, 5], [0, 1]])


def test_gather_rows_backward_zero_outside_idx():
    x = t64(np.ones((4, 3)))
    nx.gather_rows(x, [1, 3]).sum().backward()
    np.testing.assert_array_equal(x.grad[[0, 2]], 0.0)
    np.testing.assert_array_equal(x.grad[[1, 3]], 1.0)


def test_gather_rows_out_of_range():
    with pytest.raises(IndexError):
        nx.gather_rows(t64(np.ones((3, 2))), [3])
    with pytest.raises(IndexError):
        nx.gather_rows(t64(np.ones((3, 2))), [-1])


@given(st.integers(1, 6), st.data())
def test_gather_scatter_conserves_gradient_mass(n, data):
    idx = data.draw(st.lists(st.integers(0, n - 1), min_size=1, max_size=8))
    rng = np.random.default_rng(len(idx))
    x = t64(rng.normal(size=(n, 3)))
    g = rng.normal(size=(len(idx), 3))
    nx.gather_rows(x, idx).backward(g)
    assert x.grad.sum() == pytest.approx(g.sum())


def test_batched_gather_rows():
    x = t64(np.arange(12.0).reshape(2, 3, 2))
    out = nx.gather_rows(x, np.array([[0, 2], [1, 1]]))
    np.testing.assert_array_equal(out.data, [[[0, 1], [4, 5]], [[8, 9], [8, 9]]])
    out.sum().backward()
    np.testing.assert_array_equal(x.grad[1, 1], [2.0, 2.0])


# -- cross entropy ----------------------------------------------------------------

def test_cross_entropy_examples():
    logits = np.zeros((3, 4))
    logits[np.arange(3), [0, 1, 2]] = 1e4
    assert nx.cross_entropy_masked(t64(logits), [0, 1, 2]).data == pytest.approx(0.0, abs=1e-9)
    assert nx.cross_entropy_masked(t64(np.zeros((5, 4))), [0, 1, 2, 3, 0]).data == pytest.approx(math.log(4))
    with pytest.raises(EmptyTargetError):
        nx.cross_entropy_masked(t64(np.zeros((2, 4))), [255, 255])


def test_cross_entropy_ignores_masked_pixels():
    logits = np.random.default_rng(1).normal(size=(4, 3))
    full = nx.cross_entropy_masked(t64(logits[:2]), [0, 2]).data
    masked = nx.cross_entropy_masked(t64(logits), [0, 2, 255, 255]).data
    assert masked == pytest.approx(full)


# -- finite differences --------------------------------------------------------------

def test_finite_diff_quadratic():
    x = t64([1.0])
    assert nx.finite_diff_check(lambda v: (v * v).sum(), [x]) < 1e-8
    assert x.grad[0] == pytest.approx(2.0)


def test_finite_diff_softmax_sum_is_flat():
    x = t64(np.random.default_rng(0).normal(size=(3, 4)))
    nx.finite_diff_check(lambda v: nx.softmax_rows(v).sum(), [x])
    np.testing.assert_allclose(x.grad, 0.0, atol=1e-12)


def test_finite_diff_two_layer_cross_entropy():
    rng = np.random.default_rng(3)
    x, w1, w2 = t64(rng.normal(size=(6, 5))), t64(rng.normal(size=(5, 7))), t64(rng.normal(size=(7, 3)))
    targets = np.array([0, 1, 2, 255, 1, 0])

    def f(x, w1, w2):
        return nx.cross_entropy_masked(nx.matmul(nx.gelu(nx.matmul(x, w1)), w2), targets)
    assert nx.finite_diff_check(f, [x, w1, w2]) < 1e-6


def test_finite_diff_rejects_non_finite():
    with pytest.raises(NumericError), np.errstate(invalid="ignore"):
        nx.finite_diff_check(lambda v: nx.log(v).sum(), [t64([-1.0])])


UNARY = {
    "exp": nx.exp, "square": nx.square, "gelu": nx.gelu, "softplus": nx.softplus,
    "normal_cdf": nx.normal_cdf, "softmax": nx.softmax_rows, "log_softmax": nx.log_softmax,
    "sqrt": lambda v: nx.sqrt(nx.square(v) + 1.0), "log": lambda v: nx.log(nx.square(v) + 1.0),
    "transpose": lambda v: v.transpose(1, 0) * 1.5, "reshape": lambda v: v.reshape(-1) * 2.0,
    "getitem": lambda v: v[1:, ::2], "mean": lambda v: v.mean(axis=0),
}


@settings(max_examples=15, deadline=None)
@given(st.sampled_from(sorted(UNARY)), st.integers(0, 2**32 - 1))
def test_unary_ops_gradcheck(name, seed):
    rng = np.random.default_rng(seed)
    x = t64(rng.normal(size=(3, 4)))
    w = rng.normal(size=UNARY[name](t64(x.data, grad=False)).shape)
    assert nx.finite_diff_check(lambda v: (UNARY[name](v) * w).sum(), [x]) < 1e-6


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_binary_ops_and_layer_norm_gradcheck(seed):
    rng = np.random.default_rng(seed)
    a, b = t64(rng.normal(size=(2, 3, 4))), t64(rng.uniform(1.5, 3.0, size=4))
    gamma, beta = t64(rng.normal(size=4)), t64(rng.normal(size=4))
    m = t64(rng.normal(size=(4, 5)))
    w = rng.normal(size=(2, 3, 5))

    def f(a, b, gamma, beta, m):
        y = nx.layer_norm(a * b + a / b - b, gamma, beta)
        z = nx.concat([y, a - 1.0], axis=1)[:, :3]
        return (nx.matmul(z, m) * w).sum()
    assert nx.finite_diff_check(f, [a, b, gamma, beta, m]) < 1e-6


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_indexing_ops_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = t64(rng.normal(size=(5, 3)))
    idx = rng.integers(0, 5, size=4)
    sidx = np.argsort(-x.data, axis=-1)[:, :2]
    w = rng.normal(size=(7, 3))

    def f(x):
        g = nx.gather_rows(x, idx)
        s = nx.scatter_add_rows(g, idx[::-1], 7)
        return (s * w).sum() + nx.square(nx.take_along(x, sidx, axis=-1)).sum()
    assert nx.finite_diff_check(f, [x]) < 1e-6


# -- optimisation ---------------------------------------------------------------------

def test_sgd_momentum_examples():
    p, g, v = np.array([5.0]), np.array([2.0]), np.zeros(1)
    nx.sgd_momentum_step([p], [g], [v], lr=1.0, momentum=0.0)
    assert p[0] == 3.0
    p, v = np.array([0.0]), np.zeros(1)
    for _ in range(2):
        nx.sgd_momentum_step([p], [np.ones(1)], [v], lr=1.0, momentum=0.9)
    assert p[0] == pytest.approx(-2.9)
    p = np.array([1.0, 2.0])
    nx.sgd_momentum_step([p], [np.ones(2)], [np.zeros(2)], lr=0.0, momentum=0.9)
    np.testing.assert_array_equal(p, [1.0, 2.0])


def test_cosine_lr_examples():
    assert nx.cosine_lr(0, 100, 0.01) == 0.01
    assert nx.cosine_lr(100, 100, 0.01, 1e-4) == pytest.approx(1e-4)
    assert nx.cosine_lr(50, 100, 0.01, 1e-4) == pytest.approx((0.01 + 1e-4) / 2)
    with pytest.raises(ValueError):
        nx.cosine_lr(0, 0, 0.01)


@given(st.integers(0, 1000), st.integers(1, 1000))
def test_cosine_lr_stays_between_bounds(t, total):
    t = min(t, total)
    assert 0.001 - 1e-15 <= nx.cosine_lr(t, total, 0.01, 0.001) <= 0.01 + 1e-15


def test_trunc_normal_bounds_and_determinism():
    a = nx.trunc_normal(nx.make_rng(0), (1000,), std=0.02)
    assert np.all(np.abs(a) <= 0.04)
    np.testing.assert_array_equal(a, nx.trunc_normal(nx.make_rng(0), (1000,), std=0.02))


@given(st.integers(1, 12), st.integers(1, 40))
def test_bilinear_rows_are_convex_weights(n_in, n_out):
    m = nx.bilinear_matrix(n_in, n_out)
    assert m.shape == (n_out, n_in)
    assert np.all(m >= 0)
    np.testing.assert_allclose(m.sum(axis=1), 1.0)


def test_bilinear_identity_when_sizes_match():
    np.testing.assert_allclose(nx.bilinear_matrix(5, 5), np.eye(5))
