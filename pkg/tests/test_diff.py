import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dklinv import diff


def fd5(fn, x, h=1e-3):
    """Five-point central difference gradient."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty(x.size)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        e = e.reshape(x.shape)
        g[i] = (8 * (fn(x + e) - fn(x - e)) - (fn(x + 2 * e) - fn(x - 2 * e))) / (12 * h)
    return g.reshape(x.shape)


def rel(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def test_square_gradient():
    val, g = diff.tape_gradient(lambda x: diff.sum_(diff.square(x)), np.array([3.0]))
    assert val == 9.0
    assert g[0] == pytest.approx(6.0, abs=1e-14)


def test_product_gradient():
    val, g = diff.tape_gradient(lambda v: v[0] * v[1], np.array([2.0, 5.0]))
    assert val == 10.0
    np.testing.assert_allclose(g, [5.0, 2.0], atol=1e-14)


def test_logdet_pullback_identity():
    # 0.5 log|K| = sum log L_ii, so the upstream L-gradient at K = I is I
    # and the symmetric K-gradient is I / 2
    K = np.eye(4)
    L = np.linalg.cholesky(K)
    np.testing.assert_allclose(diff.cholesky_pullback(L, np.eye(4)), 0.5 * np.eye(4), atol=1e-15)
    _, g = diff.tape_gradient(lambda k: diff.sum_(diff.log(diff.diag(diff.cholesky(k)))), K)
    np.testing.assert_allclose(g, 0.5 * np.eye(4), atol=1e-15)


def test_logdet_gradient_2x2():
    K = np.array([[4.0, 2.0], [2.0, 3.0]])

    def f(k):
        return 2.0 * diff.sum_(diff.log(diff.diag(diff.cholesky(k))))

    _, g = diff.tape_gradient(f, K)
    np.testing.assert_allclose(g, [[0.375, -0.25], [-0.25, 0.5]], atol=1e-14)


def test_nlml_pullback_matches_fd():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(6, 6))
    K0 = A @ A.T + 6 * np.eye(6)
    y = rng.normal(size=6)

    def f(k):
        k = 0.5 * (k + diff.transpose(k))
        L = diff.cholesky(k)
        v = diff.solve_triangular(L, y)
        return 0.5 * diff.sum_(diff.square(v)) + diff.sum_(diff.log(diff.diag(L)))

    _, g = diff.tape_gradient(f, K0)
    fd = fd5(lambda k: diff.tape_gradient(f, k)[0], K0)
    assert rel(g, fd) < 1e-6


unary = [diff.exp, diff.tanh, diff.sigmoid, diff.square, lambda a: diff.power(a, 3.0),
         lambda a: diff.log(diff.add(diff.square(a), 1.0)), lambda a: diff.reciprocal(diff.add(a, 3.0))]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, len(unary) - 1), st.integers(0, 2**31))
def test_unary_ops_match_fd(k, seed):
    x = np.random.default_rng(seed).uniform(-2, 2, size=5)
    fn = lambda v: diff.sum_(unary[k](v))
    _, g = diff.tape_gradient(fn, x)
    assert rel(g, fd5(lambda v: diff.tape_gradient(fn, v)[0], x)) < 1e-6


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_matrix_ops_match_fd(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2, 2, size=12)
    B = rng.uniform(-2, 2, size=(4, 3))
    w = rng.uniform(-2, 2, size=3)

    def fn(v):
        A = diff.reshape(v, (3, 4))
        C = diff.matmul(A, B)  # 3 x 3
        D = diff.einsum("ij,jk->ik", C, diff.transpose(C))
        E = diff.block([[D, C], [C, D]])
        F = diff.concatenate([diff.take(v, np.array([0, 3, 3])), diff.diag(C)])
        return diff.sum_(diff.mul(diff.tanh(E), 0.5)) + diff.sum_(F * F) + diff.sum_(diff.matmul(C, w))

    _, g = diff.tape_gradient(fn, x)
    assert rel(g, fd5(lambda v: diff.tape_gradient(fn, v)[0], x)) < 1e-6


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_triangular_solve_matches_fd(seed):
    rng = np.random.default_rng(seed)
    L0 = np.tril(rng.uniform(-1, 1, size=(4, 4))) + 3 * np.eye(4)
    b = rng.uniform(-2, 2, size=4)

    def fn(v):
        L = diff.reshape(v, (4, 4))
        return diff.sum_(diff.square(diff.solve_triangular(L, b, trans=True))) + \
            diff.sum_(diff.solve_triangular(L, b))

    def masked(v):
        return fn(v * np.tril(np.ones((4, 4))).ravel())

    x = L0.ravel()
    _, g = diff.tape_gradient(masked, x)
    assert rel(g, fd5(lambda v: diff.tape_gradient(masked, v)[0], x)) < 1e-6


def test_tape_is_deterministic():
    x = np.linspace(-1, 1, 7)
    fn = lambda v: diff.sum_(diff.tanh(diff.mul(v, v)))
    a = diff.tape_gradient(fn, x)
    b = diff.tape_gradient(fn, x)
    assert a[0] == b[0]
    assert np.array_equal(a[1], b[1])


@pytest.mark.filterwarnings("ignore:invalid value")
def test_non_finite_value_raises():
    with pytest.raises(diff.NonFiniteError):
        diff.tape_gradient(lambda v: diff.sum_(diff.log(v)), np.array([-1.0]))


def test_fd_derivative_examples():
    st1 = diff.Stencil.build((1,), 1e-3)
    assert diff.fd_derivative(lambda p: np.sin(p[0]), [0.0], st1) == pytest.approx(1.0, abs=1e-6)
    st2 = diff.Stencil.build((2,), 0.37)
    assert diff.fd_derivative(lambda p: p[0] ** 2, [1.7], st2) == pytest.approx(2.0, abs=1e-12)


def test_mixed_rbf_derivative_vanishes_at_unit_distance():
    # d/dx d/dx' exp(-(x - x')^2 / 2) = (1 - (x - x')^2) exp(...) = 0 at |x - x'| = 1
    st = diff.Stencil.build((1, 1), 1e-3)
    k = lambda p: np.exp(-0.5 * (p[0] - p[1]) ** 2)
    assert abs(diff.fd_derivative(k, [0.0, 1.0], st)) <= 1e-6


@pytest.mark.parametrize("accuracy", [2, 4])
@pytest.mark.parametrize("order", [0, 1, 2])
def test_stencil_moment_conditions(accuracy, order):
    st = diff.Stencil.build((order,), 1.0, accuracy)
    x = st.offsets[:, 0]
    for deg in range(order + accuracy):
        moment = np.sum(st.weights * x**deg)
        expected = float(np.prod(range(1, order + 1))) if deg == order else 0.0
        assert moment == pytest.approx(expected, abs=1e-10)
    if order >= 1:
        assert abs(np.sum(st.weights)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.floats(-1, 1))
def test_fd_exact_on_cubics_with_fourth_order(coeffs, x0):
    poly = np.polynomial.Polynomial(coeffs)
    for k in (1, 2):
        st = diff.Stencil.build((k,), 0.1, 4)
        est = diff.fd_derivative(lambda p: poly(p[0]), [x0], st)
        assert est == pytest.approx(poly.deriv(k)(x0), abs=1e-10)
