import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from icct import autodiff as ad
from icct.autodiff import InvalidParameterError, ShapeError, Tape
from oracles import central_diff, np_softmax


def grad_of(fn, *arrays):
    tape = Tape()
    params = [tape.param(a) for a in arrays]
    out = fn(*params)
    tape.backward(out)
    return out.data, [tape.grad(p) for p in params]


# ---------------------------------------------------------------- basic ops


def test_product_rule():
    _, (gx, gy) = grad_of(lambda x, y: x * y, 2.0, 3.0)
    assert (gx, gy) == (3.0, 2.0)


def test_stop_grad_blocks_gradient():
    _, (g,) = grad_of(lambda v: ad.stop_grad(v).sum() + 0.0 * v.sum(), np.array([1.0, -2.0, 3.0]))
    np.testing.assert_array_equal(g, np.zeros(3))


def test_stop_grad_is_value_preserving_and_idempotent():
    tape = Tape()
    v = tape.param(np.array([0.5, -1.5]))
    s = ad.stop_grad(ad.stop_grad(v))
    np.testing.assert_array_equal(s.data, v.data)
    assert not s.requires_grad


def test_sigmoid_slope_at_zero():
    _, (g,) = grad_of(ad.sigmoid, 0.0)
    assert g == 0.25


def test_shape_mismatch_raises():
    tape = Tape()
    a = tape.param(np.ones(3))
    b = tape.param(np.ones(4))
    with pytest.raises(ShapeError):
        a + b
    with pytest.raises(ShapeError):
        ad.matmul(tape.param(np.ones((2, 3))), tape.param(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        ad.dot(a, b)


def test_tape_records_in_topological_order():
    tape = Tape()
    x = tape.param(np.ones(2))
    y = ad.tanh(x * 2.0).sum()
    for i, node in enumerate(tape.nodes):
        assert all(j < i for j in node.inputs)
    assert y.index == len(tape) - 1


def test_no_grad_tape_records_no_backward():
    tape = Tape(grad_enabled=False)
    x = tape.param(np.ones(2))
    y = ad.exp(x).sum()
    assert not y.requires_grad
    assert all(node.vjp is None for node in tape.nodes)


def _expr_mlp(x, w, b):
    h = ad.tanh(ad.matmul(w, x) + b)
    return (ad.sigmoid(h) * h).sum() + ad.log(ad.exp(h) + 1.0).sum()


def _expr_mix(x, w, b):
    z = ad.concat([x * b[:3], ad.relu(w[0]) + 0.3], axis=0)
    return ad.dot(ad.softplus(z), ad.abs_(z)) + ad.square(ad.clip(x, -0.8, 0.8)).mean()


def _expr_softmax(x, w, b):
    p = ad.softmax(ad.matmul(w, x), tau=0.7)
    return ad.dot(p, b) + ad.minimum(x, x * 0.5 + 0.1).sum() + (x / (ad.abs_(b[:3]) + 1.0)).sum()


def _expr_batched(x, w, b):
    xb = ad.reshape(ad.concat([x, x * 2.0], axis=0), (2, 3))
    return (ad.tanh(xb @ w.reshape(3, 4)) * b[:4]).sum(axis=1).sum() + ad.scale(ad.take(x, [0, 0, 2]).sum(), 2.0)


@pytest.mark.parametrize("expr", [_expr_mlp, _expr_mix, _expr_softmax, _expr_batched])
def test_composites_match_finite_differences(expr):
    # 4 expressions x 25 instances = 100 random instances
    rng = np.random.default_rng(0)
    for _ in range(25):
        x = rng.normal(size=3)
        w = rng.normal(size=(4, 3))
        b = rng.normal(size=4)
        _, grads = grad_of(expr, x, w, b)
        arrays = [x, w, b]
        for i, g in enumerate(grads):

            def f(v, i=i):
                args = list(arrays)
                args[i] = v
                tape = Tape(grad_enabled=False)
                return float(expr(*[tape.constant(a) for a in args]).data)

            fd = central_diff(f, arrays[i].copy(), h=1e-5)
            np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-7)


# ---------------------------------------------------------------- softmax


def test_softmax_paper_example():
    np.testing.assert_allclose(ad.softmax(np.array([3.0, 0.0])), [0.95, 0.05], atol=5e-3)


def test_softmax_derived_values():
    np.testing.assert_allclose(ad.softmax(np.array([2.0, 1.0])), [0.7311, 0.2689], atol=5e-5)


def test_softmax_constant_is_uniform():
    np.testing.assert_allclose(ad.softmax(np.full(5, 3.3)), np.full(5, 0.2))


def test_softmax_large_logits_are_stable():
    out = ad.softmax(np.array([1000.0, 0.0, -1000.0]))
    assert np.all(np.isfinite(out))
    assert out[0] == 1.0


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_softmax_rejects_nonpositive_temperature(tau):
    with pytest.raises(InvalidParameterError):
        ad.softmax(np.array([1.0, 2.0]), tau=tau)


@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-30, 30)))
def test_softmax_sums_to_one_and_is_monotone(q):
    p = ad.softmax(q)
    assert abs(p.sum() - 1.0) < 1e-12
    order = np.argsort(q, kind="stable")
    assert np.all(np.diff(p[order]) >= -1e-15)


# ---------------------------------------------------------------- diff_argmax


def test_diff_argmax_paper_example():
    tape = Tape()
    q = tape.param(np.array([3.0, 0.0]))
    h = ad.diff_argmax(q)
    np.testing.assert_array_equal(h.data, [1.0, 0.0])
    np.testing.assert_allclose(ad.softmax(q).data, [0.95, 0.05], atol=5e-3)


def test_diff_argmax_single_element():
    tape = Tape()
    np.testing.assert_array_equal(ad.diff_argmax(tape.param(np.array([5.0]))).data, [1.0])


def test_diff_argmax_empty_raises():
    tape = Tape()
    with pytest.raises(InvalidParameterError):
        ad.diff_argmax(tape.param(np.array([])))


def test_diff_argmax_gradient_matches_soft_readout_fd():
    u = np.array([1.0, 0.0])
    _, (g,) = grad_of(lambda q: ad.dot(ad.diff_argmax(q), u), np.array([1.0, -1.0]))
    fd = central_diff(lambda q: np_softmax(q) @ u, np.array([1.0, -1.0]), h=1e-6)
    np.testing.assert_allclose(g, fd, rtol=1e-5)


@settings(max_examples=200)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)))
def test_diff_argmax_is_exactly_one_hot(q):
    tape = Tape()
    h = ad.diff_argmax(tape.param(q)).data
    assert h.sum() == 1.0
    assert np.count_nonzero(h) == 1
    assert h[np.argmax(q)] == 1.0


def test_straight_through_identity_is_exact():
    """Through a readout linear in the selector, ST and softmax gradients coincide bitwise."""
    rng = np.random.default_rng(1)
    for _ in range(50):
        q = rng.normal(size=5)
        u = rng.normal(size=5)
        w = rng.normal(size=5)
        _, (g_st,) = grad_of(lambda q: ad.dot(ad.diff_argmax(q * w), u), q)
        _, (g_soft,) = grad_of(lambda q: ad.dot(ad.softmax(q * w), u), q)
        np.testing.assert_array_equal(g_st, g_soft)


def test_straight_through_matches_frozen_selection_surrogate():
    """For nonlinear readouts the ST gradient is that of hard + soft(q') - soft(q)."""
    rng = np.random.default_rng(2)
    for _ in range(50):
        q0 = rng.normal(size=4)
        u = rng.normal(size=4)
        _, (g,) = grad_of(lambda q: ad.tanh(ad.dot(ad.diff_argmax(q), u)) * 3.0, q0)
        hard = np.eye(4)[np.argmax(q0)]
        s0 = np_softmax(q0)
        fd = central_diff(lambda q: 3.0 * np.tanh((hard + np_softmax(q) - s0) @ u), q0.copy())
        np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-9)


# ---------------------------------------------------------------- diff_topk


def _topk(q, k):
    tape = Tape()
    return ad.diff_topk(tape.param(np.asarray(q, dtype=float)), k).data


def test_diff_topk_examples():
    np.testing.assert_array_equal(_topk([0.5, 2.0, 1.0], 2), [0, 1, 1])
    np.testing.assert_array_equal(_topk([0.5, 2.0, 1.0], 3), [1, 1, 1])
    np.testing.assert_array_equal(_topk([2.0, 2.0, 0.0], 1), [1, 0, 0])


@pytest.mark.parametrize("k", [0, 4])
def test_diff_topk_rejects_bad_k(k):
    with pytest.raises(InvalidParameterError):
        _topk([1.0, 2.0, 3.0], k)


@settings(max_examples=200)
@given(
    arrays(np.float64, st.integers(1, 8), elements=st.floats(-20, 20)),
    st.integers(1, 8),
)
def test_diff_topk_is_exactly_k_hot(q, k):
    k = min(k, q.size)
    h = _topk(q, k)
    assert h.sum() == k
    assert set(np.unique(h)) <= {0.0, 1.0}
    chosen = np.sort(q[h == 1])
    rest = q[h == 0]
    if rest.size:
        assert chosen[0] >= rest.max()


def test_diff_topk_gradient_is_sum_of_masked_rounds():
    q0 = np.array([0.3, -1.0, 2.0, 0.7])
    u = np.array([1.0, 2.0, -1.0, 0.5])
    _, (g,) = grad_of(lambda q: ad.dot(ad.diff_topk(q, 2), u), q0)

    def surrogate(q):
        first = np_softmax(q)
        masked = q.copy()
        masked[2] = -np.inf
        return (first + np_softmax(masked)) @ u

    np.testing.assert_allclose(g, central_diff(surrogate, q0.copy()), rtol=1e-5)


# ---------------------------------------------------------------- gumbel


def test_gumbel_zero_noise_equals_diff_argmax():
    rng = np.random.default_rng(3)
    for _ in range(20):
        q = rng.normal(size=5)
        tape = Tape()
        a = ad.gumbel_softmax_argmax(tape.param(q), 1.0, noise=np.zeros(5)).data
        b = ad.diff_argmax(tape.param(q)).data
        np.testing.assert_array_equal(a, b)


def test_gumbel_rejects_bad_temperature():
    tape = Tape()
    with pytest.raises(InvalidParameterError):
        ad.gumbel_softmax_argmax(tape.param(np.zeros(2)), 0.0, np.random.default_rng(0))


def _gumbel_freq(q, n, seed):
    rng = np.random.default_rng(seed)
    tape = Tape(grad_enabled=False)
    qv = tape.param(np.tile(q, (n, 1)))
    return ad.gumbel_softmax_argmax(qv, 1.0, rng).data[:, 0].mean()


def test_gumbel_symmetric_logits_select_evenly():
    assert abs(_gumbel_freq([0.0, 0.0], 10_000, 4) - 0.5) <= 0.02


def test_gumbel_max_matches_softmax_probability():
    expected = np.e**2 / (np.e**2 + 1)  # ~0.881
    assert abs(_gumbel_freq([2.0, 0.0], 100_000, 5) - expected) <= 0.01


def test_gumbel_gradient_flows_through_perturbed_softmax():
    q0 = np.array([0.2, 0.1, -0.4])
    noise = np.array([0.5, -0.3, 0.9])
    u = np.array([1.0, -2.0, 0.5])
    _, (g,) = grad_of(lambda q: ad.dot(ad.gumbel_softmax_argmax(q, 0.5, noise=noise), u), q0)
    fd = central_diff(lambda q: np_softmax((q + noise) / 0.5) @ u, q0.copy())
    np.testing.assert_allclose(g, fd, rtol=1e-5)


def test_prod_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    for _ in range(20):
        x = rng.normal(size=(3, 4))
        _, (g,) = grad_of(lambda v: (ad.prod(v, axis=1) * np.arange(1.0, 4.0)).sum(), x)
        fd = central_diff(lambda v: (np.prod(v, axis=1) * np.arange(1.0, 4.0)).sum(), x.copy())
        np.testing.assert_allclose(g, fd, rtol=1e-6)


def test_prod_gradient_is_exact_with_zero_factors():
    x = np.array([0.0, 2.0, 0.0, 3.0, 1.0])
    _, (g,) = grad_of(lambda v: ad.prod(v, axis=0), x)
    np.testing.assert_array_equal(g, [0.0, 0.0, 0.0, 0.0, 0.0])
    x = np.array([0.0, 2.0, 3.0])
    _, (g,) = grad_of(lambda v: ad.prod(v, axis=0), x)
    np.testing.assert_array_equal(g, [6.0, 0.0, 0.0])
