import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import _cases as C
from jachess import autodiff as ad

NAMES = [name for name, _, _ in C.primitive_cases(np.random.default_rng(0))]


@pytest.mark.parametrize("name", NAMES)
def test_primitive_matches_finite_differences(name):
    rng = np.random.default_rng(7)
    fn, arrs = {n: (f, a) for n, f, a in C.primitive_cases(rng)}[name]
    assert C.check_primitive(fn, arrs, rng) < 1e-6


@pytest.mark.parametrize("seed", [0, 1])
def test_transformer_loss_gradient(seed):
    assert C.transformer_grad_error(seed) < 1e-6


def _hvp_fd(f_grad, x, u, h=1e-5):
    return (f_grad(x + h * u) - f_grad(x - h * u)) / (2 * h)


@pytest.mark.parametrize("op", [ad.tanh, ad.gelu, ad.softmax, ad.layer_norm, ad.exp])
def test_second_order_matches_differenced_gradient(op):
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((2, 5))
    w = rng.standard_normal((2, 5))
    u = rng.standard_normal((2, 5))

    def first(x):
        g = ad.Graph()
        xl = g.leaf(x)
        return ad.grad(ad.dot(op(xl), w), [xl])[0].data

    g = ad.Graph(second_order=True)
    x = g.leaf(x0)
    gx = ad.grad(ad.dot(op(x), w), [x], create_graph=True)[0]
    hv = ad.grad(ad.dot(gx, u), [x])[0].data
    assert C.rel_err(hv, _hvp_fd(first, x0, u)) < 1e-6


def test_third_order_through_hvp():
    # f = sum(x^4) -> grad of ||H u||^2 w.r.t. x is analytic
    g = ad.Graph(second_order=True)
    x0 = np.array([0.5, -1.0, 2.0])
    u = np.array([1.0, 2.0, -1.0])
    x = g.leaf(x0)
    gx = ad.grad(ad.sum_(ad.square(ad.square(x))), [x], create_graph=True)[0]
    hu = ad.grad(ad.dot(gx, u), [x], create_graph=True)[0]
    out = ad.dot(hu, hu)
    d = ad.grad(out, [x])[0].data
    # H u = 12 x^2 u; ||Hu||^2 = sum 144 x^4 u^2; derivative 576 x^3 u^2
    np.testing.assert_allclose(d, 576 * x0 ** 3 * u ** 2, rtol=1e-12)


def test_create_graph_needs_second_order_graph():
    g = ad.Graph()
    x = g.leaf(np.ones(3))
    with pytest.raises(ad.SecondOrderError):
        ad.grad(ad.sum_(ad.square(x)), [x], create_graph=True)


def test_non_scalar_output_needs_seed():
    g = ad.Graph()
    x = g.leaf(np.ones(3))
    with pytest.raises(ValueError, match="scalar"):
        ad.grad(ad.square(x), [x])
    got = ad.grad(ad.square(x), [x], seed=np.array([1.0, 2.0, 3.0]))[0].data
    np.testing.assert_allclose(got, [2.0, 4.0, 6.0])


def test_shape_errors_name_the_op():
    with pytest.raises(ad.ShapeError, match="matrix-multiply"):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))
    with pytest.raises(ad.ShapeError, match="vjp"):
        g = ad.Graph()
        x = g.leaf(np.ones(2))
        ad.vjp(ad.square(x), np.ones(3), x)


def test_unreachable_input_gets_zero_with_warning():
    g = ad.Graph()
    x, y = g.leaf(np.ones(2)), g.leaf(np.ones(3))
    with pytest.warns(UserWarning, match="unreachable"):
        gy = ad.grad(ad.sum_(x), [y])[0]
    assert np.all(gy.data == 0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ad.grad(ad.sum_(x), [y], allow_unused=True)


def test_backward_map_marks_unreachable():
    g = ad.Graph()
    x, y = g.leaf(np.ones(2)), g.leaf(np.ones(2))
    with pytest.warns(UserWarning):
        gm = ad.backward(ad.sum_(ad.mul(x, x)), [x, y])
    assert gm.unreachable == {y.node}
    np.testing.assert_allclose(gm[x.node].data, [2.0, 2.0])


def test_gradient_accumulates_over_reuse():
    g = ad.Graph()
    x = g.leaf(np.array([3.0]))
    out = ad.sum_(x * x + x * 2.0 + x)
    assert ad.grad(out, [x])[0].data[0] == pytest.approx(9.0)


def test_vjp_matches_explicit_jacobian():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((3, 4))
    g = ad.Graph()
    x = g.leaf(rng.standard_normal(4))
    z = ad.matmul(ad.Tensor(A), ad.reshape(x, (4, 1)))
    v = rng.standard_normal((3, 1))
    np.testing.assert_allclose(ad.vjp(z, v, x).data, (v.T @ A).ravel(), rtol=1e-12)


def test_replay_recomputes_from_leaves():
    g = ad.Graph()
    x = g.leaf(np.array([1.0, 2.0]))
    y = ad.exp(x)
    x.data[:] = [0.0, 0.0]
    values = g.replay()
    np.testing.assert_allclose(values[y.node], [1.0, 1.0])


def test_numpy_backend_matches_numba():
    from jachess import _kernels as K

    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 4, 5))
    ids = rng.integers(0, 6, 12)
    src = rng.standard_normal((12, 5))
    before = K.backend()
    try:
        out = {}
        for b in ("numpy", "numba"):
            K.set_backend(b)
            out[b] = (K.softmax(x), K.layer_norm(x), K.gelu(x), K.scatter_rows(src, ids, 6))
        for a, b in zip(out["numpy"], out["numba"]):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)
    finally:
        K.set_backend(before)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)),
              elements=st.floats(-30, 30)))
def test_softmax_rows_are_distributions(x):
    p = ad.softmax(ad.Tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(2, 8), elements=st.floats(-5, 5)))
def test_sum_of_squares_gradient_is_twice_input(x):
    g = ad.Graph()
    t = g.leaf(x)
    np.testing.assert_allclose(ad.grad(ad.dot(t, t), [t])[0].data, 2 * x, rtol=1e-12, atol=1e-15)
