import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bye import tensor as T
from bye.tensor import AdamState, Tensor, adam_step

from conftest import gradcheck

TOL = 1e-3


def away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def weights(rng, shape):
    # fixed random projection so every op reduces to a scalar with a non-trivial gradient
    return rng.normal(size=shape)


UNARY = {
    "exp": lambda x: T.exp(x * 0.5),
    "log": lambda x: T.log(T.exp(x) + 1.0),
    "relu": T.relu,
    "l2_normalize": lambda x: T.l2_normalize(x, axis=1),
    "transpose": T.transpose,
    "reshape": lambda x: T.reshape(x, (-1,)),
    "sum": lambda x: T.tsum(x, axis=0),
    "mean": lambda x: T.mean(x, axis=1, keepdims=True),
    "max_reduce": lambda x: T.max_reduce(x, axis=0),
    "logsumexp": lambda x: T.logsumexp(x, axis=1),
    "gather_rows": lambda x: T.gather_rows(x, np.array([0, 2, 2, 1])),
    "pick": lambda x: T.pick(x, np.array([0, 1, 2]), np.array([3, 0, 3])),
    "segment_max": lambda x: T.segment_max(x, np.array([0, 2])),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", range(20))
def test_unary_gradients(name, seed):
    rng = np.random.default_rng(seed)
    x = away_from_zero(rng, (4, 5))
    probe = weights(rng, np.asarray(UNARY[name](Tensor(x)).data).shape)
    err = gradcheck(lambda t: T.tsum(UNARY[name](t) * Tensor(probe, dtype=t.data.dtype)), [x])
    assert err < TOL, f"{name}: relative error {err:.2e}"


BINARY = {
    "add": (lambda a, b: a + b, (3, 4), (1, 4)),
    "sub": (lambda a, b: a - b, (3, 4), (3, 1)),
    "mul": (lambda a, b: a * b, (3, 4), (3, 4)),
    "div": (lambda a, b: a / (b * b + 1.0), (3, 4), (4,)),
    "matmul": (T.matmul, (3, 4), (4, 2)),
    "linear": (T.linear, (5, 4), (4, 3)),
    "concat": (lambda a, b: T.concat([a, b], axis=0), (3, 4), (2, 4)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("seed", range(20))
def test_binary_gradients(name, seed):
    op, sa, sb = BINARY[name]
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=sa), rng.normal(size=sb)
    probe = weights(rng, op(Tensor(a), Tensor(b)).shape)
    err = gradcheck(lambda x, y: T.tsum(op(x, y) * Tensor(probe, dtype=x.data.dtype)), [a, b])
    assert err < TOL, f"{name}: relative error {err:.2e}"


@pytest.mark.parametrize("training", [True, False])
@pytest.mark.parametrize("seed", range(20))
def test_batch_norm_gradients(training, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(7, 3)) * 2 + 1
    gamma, beta = rng.uniform(0.5, 1.5, 3), rng.normal(size=3)
    rm, rv = rng.normal(size=3), rng.uniform(0.5, 2, 3)
    probe = rng.normal(size=(7, 3))

    def op(x, g, b):
        # fresh buffers each call so the in-place running update cannot leak between evaluations
        out = T.batch_norm(x, g, b, rm.copy(), rv.copy(), training)
        return T.tsum(out * Tensor(probe, dtype=x.data.dtype))

    assert gradcheck(op, [x, gamma, beta]) < TOL


def test_linear_with_bias_gradients():
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3)), rng.normal(size=3)
    probe = rng.normal(size=(5, 3))
    assert gradcheck(lambda x, w, b: T.tsum(T.linear(x, w, b) * Tensor(probe, dtype=x.data.dtype)), [x, w, b]) < TOL


def test_logsumexp_mask_gradient():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 4))
    mask = ~np.eye(4, dtype=bool)
    g = Tensor(x, requires_grad=True)
    T.tsum(T.logsumexp(g, axis=1, mask=mask)).backward()
    assert np.all(np.diag(g.grad) == 0)
    assert gradcheck(lambda t: T.tsum(T.logsumexp(t, axis=1, mask=mask)), [x]) < TOL


def test_logsumexp_is_stable_for_large_inputs():
    x = Tensor(np.array([[1000.0, 1000.0], [-1000.0, -1000.0]]))
    np.testing.assert_allclose(T.logsumexp(x, axis=1).data, [1000 + np.log(2), -1000 + np.log(2)], rtol=1e-6)


def test_gradients_accumulate_over_shared_subexpressions():
    x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    y = x * x
    T.tsum(y + y * x).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 3 * x.data**2)


def test_backward_needs_scalar():
    with pytest.raises(ValueError, match="scalar"):
        (Tensor(np.ones(3), requires_grad=True) * 2.0).backward()


def test_no_grad_skips_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.tsum(x * 2.0)
    assert not y.requires_grad and y._parents == ()
    assert T.grad_enabled()


def test_relu_gradient_at_zero_is_zero():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    T.tsum(T.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_max_reduce_routes_gradient_to_first_maximum():
    x = Tensor(np.array([[1.0, 5.0], [3.0, 5.0], [3.0, 0.0]]), requires_grad=True)
    T.tsum(T.max_reduce(x, axis=0)).backward()
    np.testing.assert_array_equal(x.grad, [[0, 1], [1, 0], [0, 0]])


def test_segment_max_matches_per_segment_max():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(10, 3))
    out = T.segment_max(Tensor(x), np.array([0, 3, 4])).data
    expected = np.stack([x[0:3].max(0), x[3:4].max(0), x[4:].max(0)]).astype(np.float32)
    np.testing.assert_array_equal(out, expected)
    with pytest.raises(ValueError, match="empty segment"):
        T.segment_max(Tensor(x), np.array([0, 3, 3]))


def test_l2_normalize_rejects_zero_vector():
    with pytest.raises(ValueError, match="zero-norm"):
        T.l2_normalize(Tensor(np.zeros((1, 3))), axis=1)


def test_batch_norm_updates_running_stats():
    x = Tensor(np.array([[1.0], [3.0]]))
    rm, rv = np.zeros(1, np.float32), np.ones(1, np.float32)
    T.batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), rm, rv, training=True)
    np.testing.assert_allclose(rm, [0.2])
    np.testing.assert_allclose(rv, [0.9 + 0.1 * 2.0])  # unbiased variance of {1, 3} is 2
    with pytest.raises(ValueError, match="at least 2 rows"):
        T.batch_norm(Tensor(np.ones((1, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)), rm, rv, training=True)


def test_adam_matches_reference_update():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = AdamState(lr=0.1)
    m = v = np.zeros(2)
    ref = p.data.astype(np.float64).copy()
    for t, g in enumerate([np.array([0.5, -1.0]), np.array([0.2, 0.3]), np.array([-1.0, 0.0])], 1):
        adam_step([p], [g.astype(np.float32)], state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-6)


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([0.0, 0.0]), requires_grad=True)
    adam_step([p], [np.array([3.0, -0.01], dtype=np.float32)], AdamState(lr=0.003))
    np.testing.assert_allclose(p.data, [-0.003, 0.003], rtol=1e-4)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
def test_logsumexp_matches_numpy(xs):
    x = np.array(xs)
    out = T.logsumexp(Tensor(x[None, :], dtype=np.float64), axis=1).data[0]
    assert np.isclose(out, np.log(np.sum(np.exp(x - x.max()))) + x.max())
