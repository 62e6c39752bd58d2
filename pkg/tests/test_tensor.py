import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import softmax as sp_softmax
from scipy.stats import norm

from fieldrecon import tensor as T
from fieldrecon.tensor import Parameter, Tape, Tensor


def test_matmul_examples():
    a = Tensor([[1, 2], [3, 4]])
    b = Tensor([[5, 6], [7, 8]])
    np.testing.assert_array_equal(T.matmul(a, b).data, [[19, 22], [43, 50]])
    m = Tensor([[1.5, -2], [0.25, 3]])
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), m).data, m.data)
    np.testing.assert_array_equal(T.matmul(Tensor(np.zeros((2, 2))), m).data, np.zeros((2, 2)))


def test_matmul_shape_error():
    with pytest.raises(T.ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_gelu_examples():
    assert T.gelu(Tensor([0.0])).data[0] == 0.0
    assert T.gelu(Tensor([1.0])).data[0] == pytest.approx(norm.cdf(1.0), abs=1e-7)
    x = np.array([6.0, 7.5, 10.0])
    np.testing.assert_allclose(T.gelu(Tensor(x)).data, x, atol=1e-6)
    # exact CDF, not the tanh approximation
    xs = np.linspace(-4, 4, 41)
    with T.precision(np.float64):
        np.testing.assert_allclose(T.gelu(Tensor(xs)).data, xs * norm.cdf(xs), atol=1e-12)


def test_layer_norm_examples():
    g, b = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_allclose(T.layer_norm(Tensor(np.full((1, 4), 3.0)), g, b).data, 0.0, atol=1e-6)
    with T.precision(np.float64):
        out = T.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-12)
    bias = Tensor([0.5, -1.0, 2.0, 0.0])
    out = T.layer_norm(Tensor(np.random.default_rng(0).normal(size=(3, 4))), Tensor(np.zeros(4)), bias)
    np.testing.assert_array_equal(out.data, np.broadcast_to(bias.data, (3, 4)))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10_000))
def test_layer_norm_moments(d, seed):
    x = np.random.default_rng(seed).normal(scale=3.0, size=(5, d))
    x = x[np.var(x, axis=1) >= 1e-2]
    if x.size == 0:
        return
    y = T.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d))).data.astype(np.float64)
    assert np.all(np.abs(y.mean(1)) < 1e-5)
    assert np.all(np.abs(y.var(1) - 1) < 1e-3)


def test_masked_softmax_examples():
    out = T.masked_softmax(Tensor([[0.3, 5.0, -2.0]]), np.array([[False, True, False]]))
    np.testing.assert_array_equal(out.data, [[0.0, 1.0, 0.0]])
    out = T.masked_softmax(Tensor(np.zeros((1, 5))), np.array([[True, True, False, True, False]]))
    np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 0, 1 / 3, 0]], atol=1e-7)
    out = T.masked_softmax(Tensor([[1.0, 2.0]]), np.ones((1, 2), dtype=bool))
    np.testing.assert_allclose(out.data, sp_softmax([[1.0, 2.0]], axis=-1), atol=1e-6)
    np.testing.assert_allclose(out.data, [[0.2689, 0.7311]], atol=1e-4)


def test_masked_softmax_fully_masked_row():
    with pytest.raises(T.DomainError):
        T.masked_softmax(Tensor(np.zeros((2, 2))), np.array([[True, False], [False, False]]))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(0, 10_000))
def test_masked_softmax_rows(s, seed):
    r = np.random.default_rng(seed)
    mask = r.random((s, s)) < 0.5
    mask[np.arange(s), r.integers(0, s, size=s)] = True
    w = T.masked_softmax(Tensor(r.normal(scale=4, size=(2, s, s))), mask).data
    assert np.all(w[:, ~mask] == 0.0)
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-6)


def test_gaussian_nll_examples():
    half = 0.5 * math.log(2 * math.pi)
    z = Tensor(np.zeros(3))
    assert T.gaussian_nll(z, Tensor(np.ones(3)), np.zeros(3)).item() == pytest.approx(half, abs=1e-6)
    assert T.gaussian_nll(z, Tensor(np.full(3, math.e)), np.zeros(3)).item() == pytest.approx(1 + half, abs=1e-6)
    assert T.gaussian_nll(z, Tensor(np.ones(3)), np.ones(3)).item() == pytest.approx(0.5 + half, abs=1e-6)
    with pytest.raises(T.DomainError):
        T.gaussian_nll(z, Tensor([1.0, 0.0, 1.0]), np.zeros(3))


def test_backward_linear_and_quadratic():
    x = np.array([[1.0], [2.0], [-3.0]])
    w = Parameter("w", np.random.default_rng(0).normal(size=(2, 3)))
    with Tape() as tape:
        loss = T.tsum(T.matmul(w, Tensor(x)))
    T.backward(loss, tape)
    np.testing.assert_allclose(w.grad, np.ones((2, 1)) @ x.T, rtol=1e-6)

    w2 = Parameter("w2", np.random.default_rng(1).normal(size=(3, 3)))
    with Tape() as tape:
        loss = T.tsum(T.square(w2))
    T.backward(loss, tape)
    np.testing.assert_allclose(w2.grad, 2 * w2.data, rtol=1e-6)


def test_backward_twice_is_an_error():
    w = Parameter("w", np.ones(2))
    with Tape() as tape:
        loss = T.tsum(T.square(w))
    T.backward(loss, tape)
    with pytest.raises(T.TapeStateError):
        T.backward(loss, tape)


def test_unused_parameter_gets_zero_gradient():
    used, unused = Parameter("a", np.ones(3)), Parameter("b", np.ones(3))
    with Tape() as tape:
        loss = T.tsum(T.mul(used, used))
    T.backward(loss, tape)
    assert np.array_equal(unused.grad, np.zeros(3))
    assert unused.grad.shape == unused.shape


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_detection_in_debug_mode():
    with pytest.raises(T.NonFiniteError):
        T.div(Tensor([1.0]), Tensor([0.0]))


PRIMITIVES = {
    "gelu": lambda a, b: T.tsum(T.gelu(a)),
    "softplus": lambda a, b: T.tsum(T.softplus(a)),
    "matmul": lambda a, b: T.tsum(T.square(T.matmul(a, T.transpose(b, (1, 0))))),
    "mul_div": lambda a, b: T.tsum(T.div(T.mul(a, b), T.add(T.square(b), 1.0))),
    "layer_norm": lambda a, b: T.tsum(T.mul(T.layer_norm(a, T.index(b, (0,)), T.index(b, (1,))), a)),
    "softmax": lambda a, b: T.tsum(T.mul(T.masked_softmax(a, np.tril(np.ones((3, 3), bool))), b)),
    "sqrt_mean": lambda a, b: T.tmean(T.sqrt(T.add(T.square(a), 1.0))),
    "concat_reshape": lambda a, b: T.tsum(T.square(T.reshape(T.concat([a, b], axis=0), (-1,)))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradcheck(name):
    r = np.random.default_rng(abs(hash(name)) % 2 ** 32)
    a = Parameter("a", r.normal(size=(3, 3)))
    b = Parameter("b", r.normal(size=(3, 3)))
    fn = PRIMITIVES[name]
    assert T.gradcheck(lambda: fn(a, b), [a, b]) < 1e-3
    assert T.gradcheck(lambda: fn(a, b), [a, b], step=1e-5, analytic_dtype=np.float64) < 1e-6


def test_gaussian_nll_gradcheck():
    r = np.random.default_rng(3)
    mu, raw = Parameter("mu", r.normal(size=(4, 2))), Parameter("raw", r.normal(size=(4, 2)))
    y = r.normal(size=(4, 2))
    fn = lambda: T.gaussian_nll(mu, T.add(T.softplus(raw), 0.1), y)
    assert T.gradcheck(fn, [mu, raw]) < 1e-3


def test_adam_first_step():
    p = Parameter("p", np.array([0.5]))
    opt = T.Adam([p], lr=0.001)
    p.grad[:] = 1.0
    opt.step()
    assert p.data[0] == pytest.approx(0.5 - 0.001 / (1 + 1e-8), abs=1e-7)
    assert opt.state.step == 1
    assert np.all(p.grad == 0)


def test_adam_zero_gradient_and_monotone():
    p = Parameter("p", np.array([1.0, -2.0]))
    opt = T.Adam([p])
    before = p.data.copy()
    opt.step()
    np.testing.assert_array_equal(p.data, before)
    assert opt.state.step == 1
    trail = [p.data.copy()]
    for _ in range(2):
        p.grad[:] = [2.0, -3.0]
        opt.step()
        trail.append(p.data.copy())
    assert trail[0][0] > trail[1][0] > trail[2][0]
    assert trail[0][1] < trail[1][1] < trail[2][1]
    assert opt.state.step == 3


def test_adamw_decays_without_gradient():
    p = Parameter("p", np.array([1.0]))
    opt = T.Adam([p], lr=0.1, weight_decay=0.01)
    opt.step()
    assert p.data[0] == pytest.approx(1.0 - 0.1 * 0.01, abs=1e-7)


def test_float32_storage_and_determinism():
    def run():
        r = np.random.default_rng(7)
        w = Parameter("w", r.normal(size=(8, 8)))
        with Tape() as tape:
            loss = T.tsum(T.gelu(T.matmul(Tensor(r.normal(size=(4, 8))), w)))
        T.backward(loss, tape)
        return loss.data.copy(), w.grad.copy()
    (l1, g1), (l2, g2) = run(), run()
    assert l1.dtype == np.float32 and g1.dtype == np.float32
    assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()
