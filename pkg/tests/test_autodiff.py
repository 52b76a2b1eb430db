import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flp import autodiff as ad
from flp.autodiff import NumericError, Tape, Tensor

from oracles import central_fd, log_softmax_loss, loop_matmul, loop_mse, rel_err


def grad_of(fn, *values):
    tape = Tape()
    leaves = [tape.leaf(v) for v in values]
    return ad.grad(fn(*leaves), leaves)


# matmul ---------------------------------------------------------------------


def test_matmul_identity():
    out = ad.matmul(np.eye(2), np.array([[3.0, 4.0], [5.0, 6.0]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_row_times_column():
    assert ad.matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    np.testing.assert_allclose(ad.matmul(a, b).data, loop_matmul(a.tolist(), b.tolist()), rtol=0, atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_records_only_when_tracked():
    tape = Tape()
    ad.matmul(np.ones((2, 2)), np.ones((2, 2)))
    assert len(tape) == 0
    w = tape.leaf(np.ones((2, 2)))
    ad.matmul(np.ones((2, 2)), w)
    assert tape.op_counts() == {"leaf": 1, "matmul": 1}


# relu -----------------------------------------------------------------------


def test_relu_values():
    assert ad.relu(np.array([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_relu_identity_on_nonnegative():
    x = np.array([0.0, 0.5, 3.0])
    np.testing.assert_array_equal(ad.relu(x).data, x)


def test_relu_backward_subgradient():
    (g,) = grad_of(lambda x: ad.sum(ad.relu(x)), np.array([-1.0, 2.0]))
    assert g.tolist() == [0.0, 1.0]
    (g0,) = grad_of(lambda x: ad.sum(ad.relu(x)), np.array([0.0]))
    assert g0.tolist() == [0.0]


# losses ---------------------------------------------------------------------


def test_mse_cases():
    assert ad.mse_loss(np.ones(3), np.ones(3)).item() == 0.0
    assert ad.mse_loss(np.array([1.0, 1.0]), np.array([0.0, 2.0])).item() == 1.0


def test_mse_matches_loop():
    rng = np.random.default_rng(1)
    p, t = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    assert abs(ad.mse_loss(p, t).item() - loop_mse(p, t)) < 1e-12


def test_mse_shape_mismatch():
    with pytest.raises(ValueError):
        ad.mse_loss(np.ones(3), np.ones(2))


def test_xent_uniform_logits():
    assert ad.softmax_cross_entropy(np.zeros(5), 2).item() == pytest.approx(math.log(5), abs=1e-12)


def test_xent_is_stable_for_large_logits():
    loss = ad.softmax_cross_entropy(np.array([1000.0, 0.0]), 0).item()
    assert math.isfinite(loss) and loss < 1e-12


def test_xent_out_of_range():
    with pytest.raises(IndexError):
        ad.softmax_cross_entropy(np.zeros(3), 3)


def test_xent_matches_loop_and_fd():
    rng = np.random.default_rng(2)
    z = rng.uniform(-2, 2, size=6)
    assert ad.softmax_cross_entropy(z, 4).item() == pytest.approx(log_softmax_loss(z.tolist(), 4), abs=1e-12)
    (g,) = grad_of(lambda t: ad.softmax_cross_entropy(t, 4), z)
    fd = central_fd(lambda v: log_softmax_loss(v.tolist(), 4), z)
    np.testing.assert_allclose(g, fd, atol=1e-6)


def test_xent_batch_averages_rows():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(3, 4))
    labels = [0, 3, 1]
    expect = np.mean([log_softmax_loss(z[i].tolist(), labels[i]) for i in range(3)])
    assert ad.softmax_cross_entropy(z, labels).item() == pytest.approx(expect, abs=1e-12)


# backward -------------------------------------------------------------------


def test_square_gradient():
    (g,) = grad_of(lambda w: ad.mul(w, w), np.array(3.0))
    assert g == 6.0


def test_backward_rejects_untracked_and_nonscalar():
    with pytest.raises(ValueError):
        ad.backward(Tensor(np.array(1.0)))
    tape = Tape()
    w = tape.leaf(np.ones(3))
    with pytest.raises(ValueError):
        ad.backward(ad.mul(w, 2.0))


def test_backward_leaves_tape_reusable():
    tape = Tape()
    w = tape.leaf(np.array([1.0, -2.0]))
    loss = ad.sum(ad.square(w))
    n = len(tape)
    first = ad.grad(loss, [w])[0]
    second = ad.grad(loss, [w])[0]
    assert len(tape) == n
    np.testing.assert_array_equal(first, second)


def test_unreachable_gradient_is_zero():
    tape = Tape()
    a, b = tape.leaf(np.ones(2)), tape.leaf(np.ones(3))
    ga, gb = ad.grad(ad.sum(a), [a, b])
    assert ga.tolist() == [1.0, 1.0] and gb.tolist() == [0.0, 0.0, 0.0]


def test_mixing_tapes_is_an_error():
    a, b = Tape().leaf(np.ones(2)), Tape().leaf(np.ones(2))
    with pytest.raises(ValueError):
        ad.add(a, b)


def test_nodes_reference_earlier_nodes():
    tape = Tape()
    w = tape.leaf(np.ones((2, 2)))
    x = ad.relu(ad.matmul(w, w))
    ad.sum(ad.mul(x, w))
    for i, node in enumerate(tape.nodes):
        assert all(p < i for p in node.inputs)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_raises():
    with pytest.raises(NumericError):
        ad.mul(np.array([1e200]), np.array([1e200]))


# finite-difference checks on every differentiable primitive -------------------

RNG = np.random.default_rng(4)


def _u(*shape):
    return RNG.uniform(-2, 2, size=shape)


UNARY = {
    "neg": (ad.neg, _u(3, 2)),
    "relu": (ad.relu, _u(3, 2)),
    "sigmoid": (ad.sigmoid, _u(3, 2)),
    "square": (ad.square, _u(3, 2)),
    "sum_axis0": (lambda t: ad.sum(t, axis=0), _u(3, 2)),
    "mean_axis1_keep": (lambda t: ad.mean(t, axis=1, keepdims=True), _u(3, 2)),
    "reshape": (lambda t: ad.reshape(t, (2, 3)), _u(3, 2)),
    "transpose": (ad.transpose, _u(3, 2)),
    "take_rows_slice": (lambda t: ad.take_rows(t, slice(1, 3)), _u(4, 2)),
    "take_rows_index": (lambda t: ad.take_rows(t, np.array([0, 2, 0])), _u(4, 2)),
    "softmax": (ad.softmax, _u(3, 4)),
}

BINARY = {
    "add_broadcast": (ad.add, _u(3, 2), _u(2)),
    "sub_broadcast": (ad.sub, _u(3, 1), _u(3, 2)),
    "mul": (ad.mul, _u(3, 2), _u(3, 2)),
    "matmul": (ad.matmul, _u(3, 4), _u(4, 2)),
    "linear_no_bias": (ad.linear, _u(5, 3), _u(2, 3)),
    "mse_loss": (ad.mse_loss, _u(3, 2), _u(3, 2)),
}


def _project(out, weights):
    return ad.sum(ad.mul(out, weights))


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitive_matches_fd(name):
    fn, x = UNARY[name]
    if name == "relu":
        x = np.where(np.abs(x) < 1e-3, 0.5, x)  # keep away from the kink
    w = RNG.normal(size=fn(x).shape)
    (g,) = grad_of(lambda t: _project(fn(t), w), x)
    fd = central_fd(lambda v: float(np.sum(fn(v).data * w)), x)
    assert rel_err(g, fd) < 1e-4


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_primitive_matches_fd(name):
    fn, a, b = BINARY[name]
    w = RNG.normal(size=fn(a, b).shape)
    ga, gb = grad_of(lambda s, t: _project(fn(s, t), w), a, b)
    assert rel_err(ga, central_fd(lambda v: float(np.sum(fn(v, b).data * w)), a)) < 1e-4
    assert rel_err(gb, central_fd(lambda v: float(np.sum(fn(a, v).data * w)), b)) < 1e-4


def test_linear_with_bias_matches_fd():
    x, w, c = _u(4, 3), _u(2, 3), _u(2)
    wts = RNG.normal(size=(4, 2))
    grads = grad_of(lambda s, t, u: _project(ad.linear(s, t, u), wts), x, w, c)
    for i, arr in enumerate((x, w, c)):
        def f(v, i=i):
            args = [x, w, c]
            args[i] = v
            return float(np.sum(ad.linear(*args).data * wts))

        assert rel_err(grads[i], central_fd(f, arr)) < 1e-4


def test_three_layer_relu_net_gradient():
    rng = np.random.default_rng(5)
    ws = [rng.normal(size=(6, 3)), rng.normal(size=(5, 6)), rng.normal(size=(2, 5))]
    x, y = rng.uniform(-2, 2, size=(4, 3)), rng.normal(size=(4, 2))

    def net(w0, w1, w2):
        h = ad.relu(ad.linear(x, w0))
        h = ad.relu(ad.linear(h, w1))
        return ad.mse_loss(ad.linear(h, w2), y)

    grads = grad_of(net, *ws)
    for i in range(3):
        def f(v, i=i):
            args = list(ws)
            args[i] = v
            return net(*args).item()

        assert rel_err(grads[i], central_fd(f, ws[i])) < 1e-4


def test_unrolled_oja_loop_gradient_wrt_feedback():
    """Five Oja steps whose postsynaptic activity comes through a feedback matrix."""
    rng = np.random.default_rng(6)
    xs, ys = rng.uniform(0, 1, size=(5, 3)), rng.normal(size=(5, 2))
    w0, B = rng.normal(size=(4, 3)) * 0.3, rng.normal(size=(4, 2))

    def loss(Bt):
        w = Tensor(w0)
        for x, y in zip(xs, ys):
            post = ad.relu(ad.matmul(Bt, y.reshape(2, 1)))
            decay = ad.mul(ad.square(post), w)
            w = ad.add(w, ad.mul(0.1, ad.sub(ad.matmul(post, x.reshape(1, 3)), decay)))
        return ad.sum(ad.square(ad.matmul(w, xs[0].reshape(3, 1))))

    (g,) = grad_of(loss, B)
    assert rel_err(g, central_fd(lambda v: loss(v).item(), B)) < 1e-4


# properties -------------------------------------------------------------------

finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4, 2), elements=finite))
def test_matmul_property(a, b):
    np.testing.assert_allclose(ad.matmul(a, b).data, loop_matmul(a.tolist(), b.tolist()), rtol=1e-10, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5,), elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_primitives_finite_on_bounded_inputs(x):
    for fn in (ad.relu, ad.sigmoid, ad.neg, ad.softmax):
        assert np.isfinite(fn(x).data).all()
    assert np.isfinite(ad.softmax_cross_entropy(x, 0).data).all()


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4,), elements=st.floats(-2, 2)))
def test_backward_deterministic(x):
    f = lambda t: ad.sum(ad.mul(ad.sigmoid(t), ad.relu(t)))  # noqa: E731
    np.testing.assert_array_equal(grad_of(f, x)[0], grad_of(f, x)[0])
