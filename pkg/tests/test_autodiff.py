import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from curriculum_maml import autodiff as ad
from curriculum_maml.autodiff import Graph, ShapeError
from curriculum_maml.model import FfnSpec, forward, init_params

from conftest import central_diff, np_cross_entropy, np_forward, rel_err


def test_add_elementwise():
    g = Graph()
    out = ad.forward_op("add", [g.constant([1.0, 2.0]), g.constant([3.0, 4.0])])
    np.testing.assert_array_equal(out.value, [4.0, 6.0])


def test_matmul_identity(rng):
    g = Graph()
    a = rng.normal(size=(3, 4))
    out = ad.matmul(g.constant(np.eye(3)), g.constant(a))
    np.testing.assert_array_equal(out.value, a)


def test_relu():
    g = Graph()
    np.testing.assert_array_equal(ad.relu(g.constant([-1.0, 0.0, 2.0])).value, [0.0, 0.0, 2.0])


def test_scalar_broadcast():
    g = Graph()
    out = ad.mul(g.constant(2.0), g.constant([1.0, 3.0]))
    np.testing.assert_array_equal(out.value, [2.0, 6.0])


@pytest.mark.parametrize("kind", ["add", "sub", "mul"])
def test_elementwise_shape_mismatch_names_op_and_shapes(kind):
    g = Graph()
    with pytest.raises(ShapeError, match=rf"{kind}.*\(2,\).*\(3,\)"):
        ad.forward_op(kind, [g.constant([1.0, 2.0]), g.constant([1.0, 2.0, 3.0])])


def test_matmul_shape_mismatch():
    g = Graph()
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(g.constant(np.ones((2, 3))), g.constant(np.ones((2, 3))))


def test_no_row_broadcasting():
    g = Graph()
    with pytest.raises(ShapeError):
        ad.add(g.constant(np.ones((2, 3))), g.constant(np.ones(3)))


def test_non_finite_result_raises():
    g = Graph()
    with pytest.raises(FloatingPointError):
        ad.exp(g.constant([1000.0]))


def test_graph_is_topologically_ordered(rng):
    g = Graph()
    params = init_params(FfnSpec(3, (4,), 2), 0).as_vars(g)
    loss = ad.cross_entropy_loss(forward(params, rng.normal(size=(2, 3)), g), [0, 1])
    ad.backward(loss, list(params.values()), create_graph=True)
    for nid, inputs in enumerate(g.inputs):
        assert all(i < nid for i in inputs)
    assert g.roots == [v.id for v in params.values()]


def test_values_are_read_only():
    g = Graph()
    v = g.variable([1.0, 2.0])
    with pytest.raises(ValueError):
        v.value[0] = 5.0


# ---------------------------------------------------------------- backward


def test_grad_sum_of_squares():
    g = Graph()
    x = g.variable([1.0, 2.0, 3.0])
    (dx,) = ad.backward(ad.sum(ad.square(x)), [x])
    np.testing.assert_allclose(dx, [2.0, 4.0, 6.0])


def test_second_derivative_of_cube():
    g = Graph()
    x = g.variable(2.0)
    y = ad.mul(ad.mul(x, x), x)
    (dy,) = ad.backward(y, [x], create_graph=True)
    assert dy.value == pytest.approx(12.0)
    (d2y,) = ad.backward(dy, [x])
    assert d2y == pytest.approx(12.0)


def test_backward_requires_scalar():
    g = Graph()
    x = g.variable([1.0, 2.0])
    with pytest.raises(ShapeError, match="scalar"):
        ad.backward(ad.square(x), [x])


def test_unrelated_variable_gets_zero_gradient():
    g = Graph()
    x = g.variable([1.0, 2.0])
    z = g.variable(np.ones((2, 2)))
    gx, gz = ad.backward(ad.sum(x), [x, z])
    np.testing.assert_array_equal(gx, [1.0, 1.0])
    np.testing.assert_array_equal(gz, np.zeros((2, 2)))


def test_gradient_accumulates_over_shared_uses():
    g = Graph()
    x = g.variable([3.0])
    y = ad.sum(ad.add(ad.mul(x, x), ad.scale(x, 4.0)))
    (dx,) = ad.backward(y, [x])
    np.testing.assert_allclose(dx, [10.0])


@pytest.mark.parametrize("value", [0.3, 2.0, 9.0])
def test_sqrt_and_reciprocal_derivatives(value):
    g = Graph()
    x = g.variable(value)
    y = ad.add(ad.sqrt_scalar(x), ad.reciprocal(x))
    (dy,) = ad.backward(y, [x], create_graph=True)
    assert dy.value == pytest.approx(0.5 / np.sqrt(value) - 1.0 / value ** 2, rel=1e-12)
    (d2y,) = ad.backward(dy, [x])
    assert d2y == pytest.approx(-0.25 * value ** -1.5 + 2.0 / value ** 3, rel=1e-12)


def test_gather_scatter_are_adjoint(rng):
    g = Graph()
    x = g.variable(rng.normal(size=(4, 3)))
    idx = np.array([2, 0, 1, 2])
    w = rng.normal(size=4)
    (dx,) = ad.backward(ad.sum(ad.mul(ad.gather(x, idx), g.constant(w))), [x])
    expected = np.zeros((4, 3))
    expected[np.arange(4), idx] = w
    np.testing.assert_array_equal(dx, expected)


def test_create_graph_flag_gives_identical_first_order_values(rng):
    spec = FfnSpec(5, (7, 6), 3)
    params = init_params(spec, 3)
    x = rng.normal(size=(4, 5))
    y = np.array([0, 2, 1, 1])
    results = []
    for create in (False, True):
        g = Graph()
        pv = params.as_vars(g)
        loss = ad.cross_entropy_loss(forward(pv, x, g), y)
        grads = ad.backward(loss, list(pv.values()), create_graph=create)
        results.append([gr.value if create else gr for gr in grads])
    for a, b in zip(*results):
        np.testing.assert_array_equal(a, b)


def test_evaluation_is_deterministic(rng):
    params = init_params(FfnSpec(4, (8,), 3), 0)
    x = rng.normal(size=(6, 4))
    y = rng.integers(0, 3, size=6)
    outs = []
    for _ in range(2):
        g = Graph()
        pv = params.as_vars(g)
        loss = ad.cross_entropy_loss(forward(pv, x, g), y)
        outs.append((loss.value.tobytes(), [a.tobytes() for a in ad.backward(loss, list(pv.values()))]))
    assert outs[0] == outs[1]


def _random_net_case(seed):
    r = np.random.default_rng(seed)
    depth = int(r.integers(1, 4))
    spec = FfnSpec(int(r.integers(2, 6)), tuple(int(h) for h in r.integers(2, 7, size=depth)),
                   int(r.integers(2, 5)))
    params = init_params(spec, seed)
    # nonzero biases so kinks are not aligned with zero inputs
    params = params.map(lambda a: a + 0.1 * r.normal(size=a.shape))
    x = r.normal(size=(int(r.integers(1, 5)), spec.input_dim))
    y = r.integers(0, spec.output_dim, size=x.shape[0])
    return params, x, y


def first_order_gradient_error(seed):
    params, x, y = _random_net_case(seed)
    g = Graph()
    pv = params.as_vars(g)
    loss = ad.cross_entropy_loss(forward(pv, x, g), y)
    analytic = np.concatenate([a.ravel() for a in ad.backward(loss, list(pv.values()))])

    def f(flat):
        return np_cross_entropy(np_forward(dict(params.unflatten(flat).items()), x), y)

    numeric = central_diff(f, params.flat(), h=1e-5)
    return rel_err(analytic, numeric)


@pytest.mark.parametrize("seed", range(20))
def test_first_order_gradients_match_finite_differences(seed):
    assert first_order_gradient_error(seed) < 1e-4


def test_two_layer_net_gradient_check():
    spec = FfnSpec(3, (5,), 4)
    r = np.random.default_rng(7)
    params = init_params(spec, 7).map(lambda a: a + 0.1 * r.normal(size=a.shape))
    x = r.normal(size=(3, 3))
    y = np.array([1, 3, 0])
    g = Graph()
    pv = params.as_vars(g)
    loss = ad.cross_entropy_loss(forward(pv, x, g), y)
    analytic = np.concatenate([a.ravel() for a in ad.backward(loss, list(pv.values()))])
    numeric = central_diff(
        lambda flat: np_cross_entropy(np_forward(dict(params.unflatten(flat).items()), x), y),
        params.flat())
    assert rel_err(analytic, numeric) < 1e-4


@settings(max_examples=40, deadline=None)
@given(
    x=arrays(np.float64, 4, elements=st.floats(-2.0, 2.0)),
    c=st.floats(-1.5, 1.5),
)
def test_second_order_matches_fd_of_analytic_gradient(x, c):
    # f(x) = sum(exp(c x)) + sum(x^2) * sum(x)
    def build(g, xv):
        return ad.add(ad.sum(ad.exp(ad.scale(xv, c))), ad.mul(ad.sum(ad.square(xv)), ad.sum(xv)))

    def analytic_grad(v):
        return c * np.exp(c * v) + 2 * v * v.sum() + (v ** 2).sum()

    g = Graph()
    xv = g.variable(x)
    (grad,) = ad.backward(build(g, xv), [xv], create_graph=True)
    np.testing.assert_allclose(grad.value, analytic_grad(x), rtol=1e-12, atol=1e-12)
    v = np.linspace(-1.0, 1.0, 4)
    (hv,) = ad.backward(ad.sum(ad.mul(grad, g.constant(v))), [xv])
    h = 1e-5
    fd = (analytic_grad(x + h * v) - analytic_grad(x - h * v)) / (2 * h)
    assert rel_err(hv, fd) < 1e-3


# ---------------------------------------------------------------- losses


def test_cross_entropy_uniform_logits():
    g = Graph()
    loss = ad.cross_entropy_loss(g.constant(np.zeros((3, 5))), [0, 3, 4])
    assert loss.value == pytest.approx(np.log(5.0), abs=1e-12)
    assert float(loss.value) == pytest.approx(1.60944, abs=1e-5)


def test_cross_entropy_saturated():
    g = Graph()
    logits = 1000.0 * np.eye(4)
    loss = ad.cross_entropy_loss(g.constant(logits), [0, 1, 2, 3])
    assert loss.value == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_matches_direct_computation(rng):
    logits = rng.normal(size=(3, 4))
    labels = np.array([3, 0, 2])
    g = Graph()
    loss = ad.cross_entropy_loss(g.constant(logits), labels)
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    direct = -np.mean(np.log(p[np.arange(3), labels]))
    assert abs(float(loss.value) - direct) < 1e-12


def test_cross_entropy_label_out_of_range():
    g = Graph()
    with pytest.raises(ValueError, match="labels"):
        ad.cross_entropy_loss(g.constant(np.zeros((2, 3))), [0, 3])


def test_mse_examples():
    g = Graph()
    assert ad.mse_loss(g.constant([1.0, 2.0]), [1.0, 2.0]).value == 0.0
    assert ad.mse_loss(g.constant([0.0, 2.0]), [0.0, 0.0]).value == 2.0
    p = g.variable([1.0])
    (dp,) = ad.backward(ad.mse_loss(p, [0.0]), [p])
    np.testing.assert_allclose(dp, [2.0])
    with pytest.raises(ShapeError):
        ad.mse_loss(g.constant([1.0, 2.0]), [1.0])
