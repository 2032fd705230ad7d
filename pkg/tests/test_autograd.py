"""Autodiff correctness: every op against central finite differences, plus
graph mechanics (re-use, accumulation, no_grad, non-finite detection)."""

import numpy as np
import pytest

from raglab import autograd as ag


def _fd_scalar(loss_fn, params, h=1e-6):
    """Central finite differences of a scalar loss at every coordinate."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for c in range(flat.size):
            keep = flat[c]
            flat[c] = keep + h
            with ag.no_grad():
                up = loss_fn().item()
            flat[c] = keep - h
            with ag.no_grad():
                down = loss_fn().item()
            flat[c] = keep
            gflat[c] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def _check_op(build, arrays, tol=1e-7):
    """Autodiff gradient of sum(build(params)) vs finite differences."""
    params = [ag.param(a.copy()) for a in arrays]

    def loss_fn():
        return ag.tsum(build(*params))

    ag.zero_grads(params)
    ag.backward(loss_fn())
    want = _fd_scalar(loss_fn, params)
    for p, w in zip(params, want):
        err = np.abs(p.grad - w) / (np.abs(p.grad) + np.abs(w) + 1e-12)
        assert err.max() < tol, f"max rel err {err.max()}"


def test_elementwise_ops_match_finite_differences(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4)) + 3.0  # keep div away from zero
    _check_op(lambda x, y: ag.add(x, y), [a, b])
    _check_op(lambda x, y: ag.sub(x, y), [a, b])
    _check_op(lambda x, y: ag.mul(x, y), [a, b])
    _check_op(lambda x, y: ag.div(x, y), [a, b])
    _check_op(lambda x: ag.neg(x), [a])
    _check_op(lambda x: ag.exp(x), [a])
    _check_op(lambda x: ag.log(x), [np.abs(a) + 0.5])
    _check_op(lambda x: ag.sqrt(x), [np.abs(a) + 0.5])
    _check_op(lambda x: ag.gelu(x), [a])


def test_broadcast_gradients_match_finite_differences(rng):
    a = rng.normal(size=(3, 4))
    row = rng.normal(size=(4,))
    col = rng.normal(size=(3, 1))
    scalar = np.array(1.5)
    _check_op(lambda x, y: ag.add(x, y), [a, row])
    _check_op(lambda x, y: ag.mul(x, y), [a, col])
    _check_op(lambda x, y: ag.mul(x, y), [a, scalar])
    _check_op(lambda x, y: ag.div(x, y), [a, np.abs(row) + 1.0])


def test_matmul_all_arities_match_finite_differences(rng):
    a2 = rng.normal(size=(3, 4))
    b2 = rng.normal(size=(4, 5))
    a3 = rng.normal(size=(2, 3, 4))
    b3 = rng.normal(size=(2, 4, 5))
    _check_op(lambda x, y: ag.matmul(x, y), [a2, b2])
    _check_op(lambda x, y: ag.matmul(x, y), [a3, b2])  # batched @ shared weight
    _check_op(lambda x, y: ag.matmul(x, y), [a3, b3])  # batched @ batched


def test_structural_ops_match_finite_differences(rng):
    a = rng.normal(size=(4, 3))
    _check_op(lambda x: ag.transpose(x, (1, 0)), [a])
    _check_op(lambda x: ag.reshape(x, (3, 4)), [a])
    _check_op(lambda x: ag.take(x, [2, 0, 2]), [a])  # repeated rows accumulate
    _check_op(lambda x: ag.take_positions(x, [1, 0, 2, 1]), [rng.normal(size=(4, 5, 3))])
    _check_op(lambda x: ag.select_last(x, [[1, 0], [2, 2]]), [rng.normal(size=(2, 2, 3))])
    _check_op(lambda x: ag.tsum(x, axis=0), [a])
    _check_op(lambda x: ag.tsum(x, axis=1, keepdims=True), [a])
    _check_op(lambda x: ag.tmean(x, axis=1), [a])
    _check_op(lambda x: ag.tmean(x), [a])


def test_fused_ops_match_finite_differences(rng):
    a = rng.normal(size=(3, 5))
    gain = rng.normal(size=(5,)) + 1.0
    bias = rng.normal(size=(5,))
    # weight the outputs: a bare sum of softmax rows is constant (grad 0)
    w = ag.constant(rng.normal(size=(3, 5)))
    _check_op(lambda x: ag.mul(ag.softmax(x), w), [a])
    _check_op(lambda x: ag.mul(ag.log_softmax(x), w), [a])
    _check_op(lambda x, g, b: ag.layer_norm(x, g, b), [a, gain, bias])


def test_chain_rule_hand_case():
    # f = sum(exp(x) * w): df/dx_i = w_i * exp(x_i), df/dw_i = exp(x_i)
    x = ag.param(np.array([0.5, -1.0]))
    w = ag.param(np.array([2.0, 3.0]))
    loss = ag.tsum(ag.mul(ag.exp(x), w))
    ag.backward(loss)
    np.testing.assert_allclose(x.grad, [2.0 * np.exp(0.5), 3.0 * np.exp(-1.0)], rtol=1e-12)
    np.testing.assert_allclose(w.grad, np.exp([0.5, -1.0]), rtol=1e-12)


def test_diamond_graph_accumulates_both_paths():
    # y = x*x + x: dy/dx = 2x + 1, where x feeds two consumers
    x = ag.param(np.array([3.0]))
    y = ag.add(ag.mul(x, x), x)
    ag.backward(ag.tsum(y))
    np.testing.assert_allclose(x.grad, [7.0], rtol=0, atol=0)


def test_shared_subgraph_backward_runs_each_node_once():
    x = ag.param(np.array([2.0]))
    e = ag.exp(x)  # consumed twice
    loss = ag.tsum(ag.add(ag.mul(e, e), e))
    ag.backward(loss)
    # d/dx (e^2x + e^x) = 2 e^2x + e^x
    np.testing.assert_allclose(x.grad, [2 * np.exp(4.0) + np.exp(2.0)], rtol=1e-12)


def test_backward_requires_scalar_loss():
    x = ag.param(np.ones((2, 2)))
    with pytest.raises(ValueError, match="scalar"):
        ag.backward(ag.mul(x, x))


def test_backward_requires_grad_path():
    x = ag.constant(np.array(3.0))
    with pytest.raises(ValueError, match="does not require grad"):
        ag.backward(ag.mul(x, x))


def test_no_grad_blocks_graph_recording():
    x = ag.param(np.array([1.0]))
    with ag.no_grad():
        y = ag.mul(x, x)
    assert not y.requires_grad
    assert y._parents == ()
    assert ag.grad_enabled()  # restored on exit


def test_no_grad_restores_flag_after_exception():
    x = ag.param(np.array([1.0]))
    with pytest.raises(RuntimeError):
        with ag.no_grad():
            raise RuntimeError("boom")
    assert ag.grad_enabled()
    assert ag.mul(x, x).requires_grad


def test_forward_nonfinite_raises():
    x = ag.param(np.array([1000.0]))
    with pytest.raises(ag.NonFiniteError):
        ag.exp(x)  # overflows to inf
    with pytest.raises(ag.NonFiniteError):
        ag.log(ag.param(np.array([-1.0])))  # NaN
    with pytest.raises(ag.NonFiniteError):
        ag.div(ag.param(np.array([1.0])), ag.constant(np.array([0.0])))


def test_leaf_nonfinite_raises_at_creation():
    with pytest.raises(ag.NonFiniteError):
        ag.tensor(np.array([np.nan]))
    with pytest.raises(ag.NonFiniteError):
        ag.param(np.array([np.inf]))


def test_backward_nonfinite_raises():
    # forward is finite but d/dx sqrt at 0 is infinite
    x = ag.param(np.array([0.0]))
    loss = ag.tsum(ag.sqrt(x))
    with pytest.raises(ag.NonFiniteError):
        ag.backward(loss)


def test_zero_grads_resets_to_zeros():
    x = ag.param(np.array([2.0]))
    ag.backward(ag.tsum(ag.mul(x, x)))
    assert x.grad[0] != 0.0
    ag.zero_grads([x])
    np.testing.assert_array_equal(x.grad, [0.0])


def test_grad_accumulates_across_backward_calls():
    x = ag.param(np.array([2.0]))
    ag.zero_grads([x])
    ag.backward(ag.tsum(ag.mul(x, x)))
    ag.backward(ag.tsum(ag.mul(x, x)))
    np.testing.assert_allclose(x.grad, [8.0])


def test_operator_sugar_matches_functions(rng):
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(2, 3)) + 2.0
    ta, tb = ag.param(a.copy()), ag.param(b.copy())
    np.testing.assert_array_equal((ta + tb).data, a + b)
    np.testing.assert_array_equal((ta - tb).data, a - b)
    np.testing.assert_array_equal((ta * tb).data, a * b)
    np.testing.assert_array_equal((ta / tb).data, a / b)
    np.testing.assert_array_equal((-ta).data, -a)
    np.testing.assert_array_equal((2.0 * ta).data, 2.0 * a)
    np.testing.assert_array_equal((ta @ ag.param(rng.normal(size=(3, 2)))).data.shape, (2, 2))


def test_finite_diff_check_accepts_correct_gradients(rng):
    w = ag.param(rng.normal(size=(4, 3)))
    x = ag.constant(rng.normal(size=(5, 4)))

    def loss_fn():
        return ag.tsum(ag.gelu(ag.matmul(x, w)))

    err = ag.finite_diff_check(loss_fn, [w], rng=np.random.default_rng(0))
    assert err < 1e-7


def test_finite_diff_check_flags_wrong_gradient(rng):
    # a deliberately wrong backward rule must produce a large relative error
    x = ag.param(rng.normal(size=(3,)))

    def broken_square(t):
        def bw(g):
            t.accumulate(g * t.data)  # missing the factor of 2

        return ag._make(t.data * t.data, "broken", (t,), bw)

    def loss_fn():
        return ag.tsum(broken_square(x))

    err = ag.finite_diff_check(loss_fn, [x], rng=np.random.default_rng(0))
    assert err > 0.3


def test_finite_diff_check_restores_parameter_values(rng):
    x = ag.param(rng.normal(size=(3,)))
    before = x.data.copy()

    def loss_fn():
        return ag.tsum(ag.mul(x, x))

    ag.finite_diff_check(loss_fn, [x], rng=np.random.default_rng(0))
    np.testing.assert_array_equal(x.data, before)


def test_take_backward_handles_repeats():
    x = ag.param(np.arange(4.0))
    y = ag.take(x, [1, 1, 3])
    ag.backward(ag.tsum(y))
    np.testing.assert_array_equal(x.grad, [0.0, 2.0, 0.0, 1.0])


def test_float64_everywhere():
    t = ag.tensor(np.ones((2, 2), dtype=np.float32))
    assert t.data.dtype == np.float64
    out = ag.mul(t, t)
    assert out.data.dtype == np.float64
