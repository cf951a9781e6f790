import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from trireweight import autodiff as ad


def fd_check(expr, name, bindings, step=1e-6, rtol=1e-6, atol=1e-9):
    analytic = ad.gradient(expr, [name], bindings)[name]

    def f(v):
        return float(ad.evaluate(expr, {**bindings, name: v}))

    numeric = ad.finite_diff_gradient(f, bindings[name], step)
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


def test_cube_value_and_derivatives():
    x = ad.param("x", ())
    y = x * x * x
    b = {"x": np.array(2.0)}
    assert float(ad.evaluate(y, b)) == 8.0
    dy = ad.grad(y, ["x"])["x"]
    assert float(ad.evaluate(dy, b)) == 12.0
    d2y = ad.grad(dy, ["x"])["x"]
    assert float(ad.evaluate(d2y, b)) == 12.0


def test_one_step_lookahead_chain():
    # theta' = theta - eta * d/dtheta (alpha * theta^2 / 2); outer = theta'^2
    theta, alpha = ad.param("theta", ()), ad.param("alpha", ())
    inner = alpha * theta * theta * 0.5
    g = ad.grad(inner, ["theta"])["theta"]
    theta_next = theta - 0.1 * g
    outer = theta_next * theta_next
    b = {"theta": np.array(1.0), "alpha": np.array(2.0)}
    meta = ad.second_order_gradient(outer, {"theta": g}, ["alpha"], b)["alpha"]
    # d/dalpha (theta (1 - 0.1 alpha))^2 = -0.2 theta^2 (1 - 0.1 alpha)
    assert meta == pytest.approx(-0.2 * 0.8)
    assert float(ad.evaluate(outer, b)) == pytest.approx(0.64)


UNARY = {
    "exp": (ad.exp, lambda r: r.normal(size=(3, 4))),
    "log": (ad.log, lambda r: r.uniform(0.5, 2.0, size=(3, 4))),
    "tanh": (ad.tanh, lambda r: r.normal(size=(3, 4))),
    "sigmoid": (ad.sigmoid, lambda r: r.normal(size=(3, 4)) * 3),
    "sqrt": (ad.sqrt, lambda r: r.uniform(0.5, 2.0, size=(3, 4))),
    "softmax": (ad.softmax, lambda r: r.normal(size=(3, 4))),
    "neg": (ad.neg, lambda r: r.normal(size=(3, 4))),
    "transpose": (ad.transpose, lambda r: r.normal(size=(3, 4))),
}


@pytest.mark.parametrize("op", sorted(UNARY))
def test_unary_gradients_match_finite_differences(op):
    fn, draw = UNARY[op]
    rng = np.random.default_rng(0)
    x = ad.param("x", (3, 4))
    w = rng.normal(size=(4, 3) if op == "transpose" else (3, 4))
    expr = ad.sum_(fn(x) * ad.constant(w))
    fd_check(expr, "x", {"x": draw(rng)})


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "maximum"])
def test_binary_broadcast_gradients(op):
    rng = np.random.default_rng(1)
    a, b = ad.param("a", (3, 4)), ad.param("b", (4,))
    fn = getattr(ad, op)
    expr = ad.sum_(fn(a, b) * ad.constant(rng.normal(size=(3, 4))))
    binds = {"a": rng.normal(size=(3, 4)), "b": rng.uniform(0.5, 1.5, size=4)}
    fd_check(expr, "a", binds)
    fd_check(expr, "b", binds)


def test_matmul_and_reductions():
    rng = np.random.default_rng(2)
    a, b = ad.param("a", (3, 5)), ad.param("b", (5, 2))
    expr = ad.mean(ad.sq_l2(a @ b, axis=-1, keepdims=True)) + ad.sum_(ad.mean(a, axis=0))
    binds = {"a": rng.normal(size=(3, 5)), "b": rng.normal(size=(5, 2))}
    fd_check(expr, "a", binds)
    fd_check(expr, "b", binds)


def test_second_derivative_of_softmax_ce_matches_fd_of_gradient():
    rng = np.random.default_rng(3)
    x = ad.param("x", (2, 3))
    y = ad.constant(np.eye(3)[[0, 2]])
    loss = -ad.sum_(y * ad.log(ad.softmax(x)))
    g = ad.grad(loss, ["x"])["x"]
    v = ad.constant(rng.normal(size=(2, 3)))
    gv = ad.sum_(g * v)  # directional derivative, differentiated again
    fd_check(gv, "x", {"x": rng.normal(size=(2, 3))}, rtol=1e-5)


def test_maximum_tie_gets_zero_subgradient():
    a = ad.param("a", (2,))
    expr = ad.sum_(ad.maximum(a, 0.0))
    g = ad.gradient(expr, ["a"], {"a": np.array([0.0, 1.0])})["a"]
    np.testing.assert_array_equal(g, [0.0, 1.0])


def test_stop_gradient_blocks_flow():
    a = ad.param("a", ())
    expr = a * ad.stop_gradient(a)
    g = ad.gradient(expr, ["a"], {"a": np.array(3.0)})["a"]
    assert float(g) == 3.0


def test_unreachable_leaf_gets_zero_gradient():
    a, b = ad.param("a", (2,)), ad.param("b", (3,))
    expr = ad.sum_(a) + 0.0 * ad.sum_(ad.stop_gradient(b))
    g = ad.gradient(expr, ["a", "b", "c"], {"a": np.ones(2), "b": np.ones(3), "c": np.ones(4)})
    np.testing.assert_array_equal(g["b"], np.zeros(3))
    np.testing.assert_array_equal(g["c"], np.zeros(4))


def test_repeated_leaf_adjoints_accumulate():
    a1, a2 = ad.param("a", ()), ad.param("a", ())
    g = ad.gradient(a1 * a2 + a1, ["a"], {"a": np.array(2.0)})["a"]
    assert float(g) == 5.0


def test_unbound_symbol():
    x = ad.input_("x", (2,))
    with pytest.raises(ad.UnboundSymbolError):
        ad.evaluate(ad.sum_(x), {})


def test_shape_mismatch_binding_and_matmul():
    x = ad.input_("x", (2, 3))
    with pytest.raises(ad.ShapeError):
        ad.evaluate(ad.sum_(x), {"x": np.ones((3, 2))})
    with pytest.raises(ad.ShapeError):
        ad.param("a", (2, 3)) @ ad.param("b", (2, 3))


def test_dynamic_batch_dimension():
    x = ad.input_("x", (None, 3))
    expr = ad.mean(ad.sq_l2(x, keepdims=True))
    assert float(ad.evaluate(expr, {"x": np.ones((5, 3))})) == 3.0
    assert float(ad.evaluate(expr, {"x": np.ones((7, 3))})) == 3.0


def test_overflow_raises():
    x = ad.param("x", ())
    with pytest.raises(ad.NumericOverflowError):
        ad.evaluate(ad.exp(x), {"x": np.array(1000.0)})
    with pytest.raises(ad.NumericOverflowError):
        ad.evaluate(ad.log(x), {"x": np.array(0.0)})
    with pytest.raises(ad.NumericOverflowError):
        ad.evaluate(x * 1.0, {"x": np.array(np.nan)})


def test_sigmoid_is_finite_at_extremes():
    x = ad.param("x", (2,))
    v = ad.evaluate(ad.sigmoid(x), {"x": np.array([-800.0, 800.0])})
    np.testing.assert_array_equal(v, [0.0, 1.0])


def test_gradient_of_non_scalar_raises():
    with pytest.raises(ad.RankError):
        ad.grad(ad.param("x", (3,)) * 2.0, ["x"])


def test_detached_inner_gradient_raises():
    x = ad.param("x", ())
    outer = x * x
    with pytest.raises(ad.DetachedGradientError):
        ad.second_order_gradient(outer, {"x": np.array(1.0)}, ["x"], {"x": np.array(1.0)})
    unrelated = ad.grad(ad.param("y", ()) * 2.0, ["y"])
    with pytest.raises(ad.DetachedGradientError):
        ad.second_order_gradient(outer, unrelated, ["x"], {"x": np.array(1.0)})


def test_finite_diff_rejects_nonfinite():
    with pytest.raises(ad.NumericOverflowError):
        ad.finite_diff_gradient(lambda p: float("inf"), np.zeros(2))


def test_program_reuse_is_pure():
    x = ad.input_("x", (None,))
    prog = ad.Program([ad.sum_(x * x)])
    a = prog.run({"x": np.arange(3.0)})[0]
    prog.run({"x": np.arange(5.0)})
    assert float(prog.run({"x": np.arange(3.0)})[0]) == float(a) == 5.0
    assert prog.symbols == {"x": (None,)}


finite = st.floats(-3, 3, allow_nan=False, allow_subnormal=False)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (3, 2), elements=finite),
       hnp.arrays(np.float64, (3, 2), elements=finite))
def test_gradient_is_linear_in_the_loss(a, w):
    x = ad.param("x", (3, 2))
    f = ad.sum_(ad.tanh(x) * ad.constant(w))
    g = ad.sum_(x * x)
    b = {"x": a}
    lhs = ad.gradient(2.0 * f + 3.0 * g, ["x"], b)["x"]
    rhs = 2.0 * ad.gradient(f, ["x"], b)["x"] + 3.0 * ad.gradient(g, ["x"], b)["x"]
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (4, 3), elements=finite))
def test_softmax_rows_sum_to_one_and_gradient_of_row_sums_vanishes(a):
    x = ad.param("x", (4, 3))
    p = ad.softmax(x)
    np.testing.assert_allclose(ad.evaluate(p, {"x": a}).sum(1), 1.0, rtol=1e-12)
    g = ad.gradient(ad.sum_(p), ["x"], {"x": a})["x"]
    np.testing.assert_allclose(g, 0.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (2, 3), elements=finite))
def test_hessian_vector_product_matches_fd(a):
    x = ad.param("x", (2, 3))
    f = ad.sum_(ad.exp(ad.tanh(x)) * x)
    g = ad.grad(f, ["x"])["x"]
    v = np.linspace(-1, 1, 6).reshape(2, 3)
    hv = ad.gradient(ad.sum_(g * ad.constant(v)), ["x"], {"x": a})["x"]
    gnum = lambda p: ad.gradient(f, ["x"], {"x": p})["x"]
    h = 1e-5
    fd = (gnum(a + h * v) - gnum(a - h * v)) / (2 * h)
    np.testing.assert_allclose(hv, fd, rtol=1e-5, atol=1e-7)
