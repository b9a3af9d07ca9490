import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from mapr import tensor as T
from fd import central_diff, max_rel_err


def test_relu_softmax_matmul_examples():
    assert np.array_equal(T.relu(T.Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    np.testing.assert_allclose(T.softmax(T.Tensor([0.0, 0.0])).data, [0.5, 0.5])
    x = np.random.default_rng(0).normal(size=(3, 5))
    assert np.array_equal(T.matmul(T.Tensor(np.eye(3)), T.Tensor(x)).data, x)


def test_sum_of_squares_grad():
    x = T.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    (x * x).sum().backward()
    assert np.array_equal(x.grad, [2.0, 4.0, 6.0])


def test_max_tie_goes_to_first_index():
    x = T.Tensor([[3.0, 1.0, 3.0]], requires_grad=True)
    T.max_over_axis(x, axis=1).sum().backward()
    assert np.array_equal(x.grad, [[1.0, 0.0, 0.0]])


def test_fan_out_accumulates():
    x = T.Tensor([1.5, -2.0], requires_grad=True)
    y = x * 3.0
    (y + y * y).sum().backward()
    np.testing.assert_allclose(x.grad, 3.0 + 18.0 * x.data)


def test_grads_accumulate_across_calls():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    (x * 2.0).sum().backward()
    (x * 2.0).sum().backward()
    assert np.array_equal(x.grad, [4.0, 4.0])


def test_errors():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(4,\)"):
        T.add(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros(4)))
    with pytest.raises(T.ShapeError, match="matmul"):
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))
    with pytest.raises(T.NonFiniteError):
        T.log(T.Tensor([1.0, np.nan]))
    with pytest.raises(T.NonFiniteError):
        T.softmax(T.Tensor([np.inf, 0.0]))
    with pytest.raises(T.DetachedError):
        T.Tensor([1.0]).sum().backward()
    with pytest.raises(T.ShapeError):
        (T.Tensor([1.0, 2.0], requires_grad=True) * 1.0).backward()


def test_tape_is_topological_and_unique():
    x = T.Tensor(np.ones(3), requires_grad=True)
    a = x * 2.0
    b = a + a
    loss = (b * a).sum()
    tape = T.build_tape(loss)
    pos = {id(n): i for i, n in enumerate(tape)}
    assert len(pos) == len(tape)
    for node in tape:
        for p in node._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(node)]


def _mlp_params(rng, dims):
    return [(T.Tensor(rng.uniform(-1, 1, (a, b)), True), T.Tensor(rng.uniform(-1, 1, b), True))
            for a, b in zip(dims[:-1], dims[1:])]


def _mlp(params, x):
    h = x
    for i, (w, b) in enumerate(params):
        h = h @ w + b
        if i < len(params) - 1:
            h = T.relu(h)
    return T.tsum(T.log_softmax(h) * np.linspace(-1, 1, h.shape[-1]))


def test_four_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(3)
    params = _mlp_params(rng, [5, 7, 6, 5, 4])
    x0 = rng.uniform(-2, 2, size=(3, 5))
    xt = T.Tensor(x0, requires_grad=True)
    _mlp(params, xt).backward()

    def f(x):
        return float(_mlp(params, T.Tensor(x)).data)

    fd = central_diff(f, x0, h=1e-4)
    assert max_rel_err(xt.grad, fd, floor=1e-6) < 1e-5
    w0 = params[1][0]
    def fw(w):
        saved = w0.data
        w0.data = w
        try:
            return float(_mlp(params, T.Tensor(x0)).data)
        finally:
            w0.data = saved
    assert max_rel_err(w0.grad, central_diff(fw, w0.data.copy()), floor=1e-6) < 1e-5


# every differentiable op against finite differences, inputs drawn from [-2, 2]
UNARY = {
    "exp": lambda t: T.exp(t),
    "log": lambda t: T.log(T.exp(t)),
    "softmax": lambda t: T.softmax(t),
    "log_softmax": lambda t: T.log_softmax(t),
    "sqrt": lambda t: T.sqrt(T.exp(t)),
    "square": lambda t: T.square(t),
    "norm": lambda t: T.norm(t, axis=-1),
    "sum_axis": lambda t: T.tsum(t, axis=0),
    "mean": lambda t: T.mean(t, axis=1),
    "reciprocal": lambda t: T.reciprocal(T.exp(t)),
    "reshape": lambda t: T.reshape(t, (-1,)),
    "take": lambda t: t[np.array([0, 2, 2]), np.array([1, 0, 0])],
    "concat": lambda t: T.concat([t, t * t], axis=-1),
    "max": lambda t: T.max_over_axis(t, axis=1),
    "relu": lambda t: T.relu(t),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_op_gradients(name):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    x0 = rng.uniform(-2, 2, size=(3, 4))
    if name == "relu":
        x0[np.abs(x0) < 1e-2] = 0.5
    weights = rng.normal(size=UNARY[name](T.Tensor(x0)).shape)

    def f(x):
        return float(np.sum(UNARY[name](T.Tensor(x)).data * weights))

    xt = T.Tensor(x0, requires_grad=True)
    T.tsum(UNARY[name](xt) * weights).backward()
    tol = 1e-3 if name in ("relu", "max") else 1e-5
    assert max_rel_err(xt.grad, central_diff(f, x0), floor=1e-6) < tol


def test_binary_broadcast_gradients():
    rng = np.random.default_rng(1)
    a0, b0 = rng.uniform(-2, 2, (2, 3, 4)), rng.uniform(-2, 2, (4,))
    for op in (T.add, T.sub, T.mul):
        a, b = T.Tensor(a0, True), T.Tensor(b0, True)
        T.tsum(op(a, b) * a0).backward()
        fa = central_diff(lambda v: float(np.sum(op(T.Tensor(v), T.Tensor(b0)).data * a0)), a0)
        fb = central_diff(lambda v: float(np.sum(op(T.Tensor(a0), T.Tensor(v)).data * a0)), b0)
        assert max_rel_err(a.grad, fa, 1e-6) < 1e-5
        assert max_rel_err(b.grad, fb, 1e-6) < 1e-5


def test_batched_matmul_and_sparse_gradients():
    rng = np.random.default_rng(2)
    a0, w0 = rng.uniform(-2, 2, (2, 5, 3)), rng.uniform(-2, 2, (3, 4))
    a, w = T.Tensor(a0, True), T.Tensor(w0, True)
    T.tsum(T.square(a @ w)).backward()
    assert max_rel_err(a.grad, central_diff(lambda v: float(np.sum((v @ w0) ** 2)), a0), 1e-6) < 1e-5
    assert max_rel_err(w.grad, central_diff(lambda v: float(np.sum((a0 @ v) ** 2)), w0), 1e-6) < 1e-5

    m = sp.random(6, 6, density=0.4, random_state=0, format="csr")
    x0 = rng.uniform(-2, 2, (6, 3))
    x = T.Tensor(x0, True)
    T.tsum(T.square(T.sparse_apply(m, x))).backward()
    fd = central_diff(lambda v: float(np.sum((m @ v) ** 2)), x0)
    assert max_rel_err(x.grad, fd, 1e-6) < 1e-5


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 10_000))
def test_linearity_of_backward(a, b, seed):
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(-2, 2, (4, 3))
    w = rng.normal(size=(3, 2))

    def l1(x):
        return T.tsum(T.exp(x @ w))

    def l2(x):
        return T.tsum(T.log_softmax(x))

    grads = []
    for fn in (l1, l2):
        x = T.Tensor(x0, True)
        fn(x).backward()
        grads.append(x.grad)
    x = T.Tensor(x0, True)
    (a * l1(x) + b * l2(x)).backward()
    np.testing.assert_allclose(x.grad, a * grads[0] + b * grads[1], rtol=0, atol=1e-12 * (1 + np.abs(grads[0]).max()))


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(7)
        params = _mlp_params(rng, [3, 8, 4])
        x = T.Tensor(rng.normal(size=(5, 3)), True)
        loss = _mlp(params, x)
        loss.backward()
        return loss.data.tobytes(), x.grad.tobytes(), params[0][0].grad.tobytes()

    assert run() == run()


def test_check_finite():
    T.Tensor([1.0, 2.0]).check_finite()
    with pytest.raises(T.NonFiniteError):
        T.Tensor([np.inf]).check_finite()
