import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from stnas import autodiff as ad
from stnas.autodiff import ContractError, GraphError, Tensor
from stnas.checks import gradcheck, primitive_checks, run_suite


def test_square_gradient_is_six(f64):
    x = Tensor(3.0, requires_grad=True)
    grads = ad.backward(x * x, [x])
    assert grads[id(x)] == pytest.approx(6.0)
    assert x.grad == pytest.approx(6.0)


def test_detach_blocks_gradient(f64):
    x = Tensor(3.0, requires_grad=True)
    ad.backward(x * ad.detach(x), [x])
    assert x.grad == pytest.approx(3.0)


def test_non_scalar_root_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        ad.backward(x * 2.0, [x])


def test_cycle_detected():
    x = Tensor(1.0, requires_grad=True)
    y = x * 2.0
    z = y * 3.0
    # wire the graph into a loop by hand
    y.node.parents = (z,)
    with pytest.raises(GraphError):
        ad.backward(z, [x])


def test_unreachable_parameter_gets_zeros(f64):
    x = Tensor(2.0, requires_grad=True)
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    grads = ad.backward(x * x, [x, w])
    np.testing.assert_array_equal(grads[id(w)], np.zeros((2, 2)))


def test_gradients_overwrite_not_accumulate(f64):
    x = Tensor(3.0, requires_grad=True)
    ad.backward(x * x, [x])
    ad.backward(x * x, [x])
    assert x.grad == pytest.approx(6.0)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.exp(x)
    assert y.node is None and not y.requires_grad


def test_leading_broadcast_only():
    with pytest.raises(ContractError):
        ad.add(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 1))))


def test_straight_through_forward_is_hard_backward_is_soft(f64):
    soft = Tensor(np.array([0.2, 0.5, 0.3]), requires_grad=True)
    hard = np.array([0.0, 1.0, 0.0])
    y = ad.straight_through(hard, soft)
    np.testing.assert_array_equal(y.values, hard)
    v = np.array([1.0, -2.0, 4.0])
    ad.backward(ad.sum(y * v), [soft])
    np.testing.assert_allclose(soft.grad, v)


def test_weighted_sum_exact_one_hot_selects_without_copy():
    a, b = Tensor(np.ones((2, 3))), Tensor(np.full((2, 3), 2.0))
    out = ad.weighted_sum(np.array([0.0, 1.0]), [a, b])
    assert out.values is b.values


def test_every_primitive_passes_gradcheck(f64):
    for r in primitive_checks(np.random.default_rng(0)):
        assert r.passed, r.line()


def test_corrupted_backward_is_reported_by_name(monkeypatch):
    def bad_exp(a):
        a = ad.as_tensor(a)
        v = np.exp(a.values)
        return ad.make_op(v, [a], [v], lambda g, s: (2.0 * g * s[0],))

    monkeypatch.setattr(ad, "exp", bad_exp)
    with ad.precision(64):
        results = {r.name: r for r in run_suite("autodiff", seed=0)}
    assert not results["gradcheck:exp"].passed
    assert results["gradcheck:add"].passed


finite = st.floats(-3, 3, allow_nan=False, width=64)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite),
       st.floats(-2, 2), st.floats(-2, 2))
def test_gradient_is_linear_in_the_loss(x0, v, a, b):
    """grad(a*f + b*g) == a*grad(f) + b*grad(g)."""
    with ad.precision(64):
        def grad_of(weights):
            x = Tensor(x0.copy(), requires_grad=True)
            f = ad.sum(ad.exp(ad.mul(x, 0.3)))
            g = ad.sum(ad.mul(ad.softmax(x), v))
            ad.backward(ad.add(ad.mul(f, weights[0]), ad.mul(g, weights[1])), [x])
            return x.grad
        np.testing.assert_allclose(grad_of((a, b)), a * grad_of((1, 0)) + b * grad_of((0, 1)),
                                   rtol=1e-9, atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (2, 5), elements=finite))
def test_backward_is_deterministic(x0):
    def run():
        x = Tensor(x0.copy(), requires_grad=True)
        ad.backward(ad.sum(ad.log_softmax(ad.relu(x) * 2.0)), [x])
        return x.grad
    np.testing.assert_array_equal(run(), run())


def test_softmax_rows_sum_to_one(rng):
    y = ad.softmax(Tensor(rng.standard_normal((4, 7)) * 30))
    np.testing.assert_allclose(y.values.sum(-1), 1.0, rtol=1e-6)


def test_tape_counts_stored_bytes_and_frees():
    x = Tensor(np.ones((10, 10), dtype=np.float32), requires_grad=True)
    with ad.track() as tape:
        y = ad.sum(ad.exp(x))
        assert tape.live_bytes > 0
        ad.backward(y, [x])
    assert tape.peak_bytes >= 400 and tape.live_bytes == 0


def test_gradcheck_helper_accepts_exact_gradient(f64):
    assert gradcheck(lambda a: ad.exp(a), [np.ones(3)]) < 1e-6
