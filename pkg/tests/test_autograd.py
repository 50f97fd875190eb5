"""Gradient checks for every autograd primitive used by the package."""

import numpy as np
import pytest

import robustvae.autograd as ag
from robustvae.autograd import Tensor

from conftest import assert_grads_close, numeric_grad


def _check_unary(op, x0, **kwargs):
    x = np.array(x0, dtype=np.float64)
    leaf = Tensor(x, requires_grad=True)
    out = op(leaf, **kwargs)
    loss = ag.asum(out * ag.as_tensor(np.arange(1.0, out.size + 1).reshape(out.shape)))
    loss.backward()
    num = numeric_grad(
        lambda: float(
            ag.asum(op(Tensor(x), **kwargs) * ag.as_tensor(np.arange(1.0, out.size + 1).reshape(out.shape))).data
        ),
        x,
    )
    assert_grads_close(leaf.grad, num)


def test_elementwise_ops():
    base = [[0.5, -1.2, 2.0], [3.1, 0.1, -0.4]]
    _check_unary(ag.exp, base)
    _check_unary(ag.log, [[0.5, 1.2, 2.0], [3.1, 0.1, 0.4]])
    _check_unary(ag.sqrt, [[0.5, 1.2, 2.0], [3.1, 0.1, 0.4]])
    _check_unary(ag.sigmoid, base)
    _check_unary(ag.softplus, base)
    _check_unary(lambda t: ag.leaky_relu(t, 0.2), base)
    _check_unary(ag.square, base)
    _check_unary(lambda t: ag.power(t, 3.0), base)
    _check_unary(ag.neg, base)


def test_binary_broadcasting_grads(rng):
    a0 = rng.standard_normal((4, 3))
    b0 = rng.standard_normal(3)
    for op in (ag.add, ag.sub, ag.mul, ag.div):
        a = Tensor(a0.copy(), requires_grad=True)
        b = Tensor(b0.copy() + 2.0, requires_grad=True)
        out = ag.asum(ag.square(op(a, b)))
        out.backward()
        a_work = a0.copy()
        b_work = b0.copy() + 2.0
        num_a = numeric_grad(lambda: float(ag.asum(ag.square(op(Tensor(a_work), Tensor(b_work)))).data), a_work)
        num_b = numeric_grad(lambda: float(ag.asum(ag.square(op(Tensor(a_work), Tensor(b_work)))).data), b_work)
        assert_grads_close(a.grad, num_a)
        assert_grads_close(b.grad, num_b)


def test_matmul_grad(rng):
    a0 = rng.standard_normal((3, 4))
    b0 = rng.standard_normal((4, 2))
    a = Tensor(a0.copy(), requires_grad=True)
    b = Tensor(b0.copy(), requires_grad=True)
    out = ag.asum(ag.square(ag.matmul(a, b)))
    out.backward()
    a_work, b_work = a0.copy(), b0.copy()
    f = lambda: float(ag.asum(ag.square(ag.matmul(Tensor(a_work), Tensor(b_work)))).data)
    assert_grads_close(a.grad, numeric_grad(f, a_work))
    assert_grads_close(b.grad, numeric_grad(f, b_work))


def test_reductions_and_logsumexp(rng):
    x0 = rng.standard_normal((5, 4))
    for make in (
        lambda t: ag.asum(t, axis=0),
        lambda t: ag.asum(t, axis=1),
        lambda t: ag.amean(t, axis=1),
        lambda t: ag.amean(t),
        lambda t: ag.logsumexp(t, axis=1),
        lambda t: ag.logsumexp(t, axis=0),
    ):
        leaf = Tensor(x0.copy(), requires_grad=True)
        out = make(leaf)
        weights = np.arange(1.0, out.size + 1).reshape(out.shape)
        loss = ag.asum(out * ag.as_tensor(weights))
        loss.backward()
        x_work = x0.copy()
        num = numeric_grad(
            lambda: float(ag.asum(make(Tensor(x_work)) * ag.as_tensor(weights)).data), x_work
        )
        assert_grads_close(leaf.grad, num)


def test_logsumexp_value_matches_numpy(rng):
    from scipy.special import logsumexp as sp_lse

    x = rng.standard_normal((6, 3)) * 10
    got = ag.logsumexp(Tensor(x), axis=1).data
    np.testing.assert_allclose(got, sp_lse(x, axis=1), rtol=1e-12)


def test_take_concat_reshape_grads(rng):
    x0 = rng.standard_normal((4, 6))
    leaf = Tensor(x0.copy(), requires_grad=True)
    left = leaf[:, :3]
    right = leaf[:, 3:]
    out = ag.asum(ag.square(ag.concat([right, left], axis=1))) + ag.asum(ag.reshape(left, (-1,)))
    out.backward()
    x_work = x0.copy()

    def f():
        t = Tensor(x_work)
        return float(
            (
                ag.asum(ag.square(ag.concat([t[:, 3:], t[:, :3]], axis=1)))
                + ag.asum(ag.reshape(t[:, :3], (-1,)))
            ).data
        )

    assert_grads_close(leaf.grad, numeric_grad(f, x_work))


def test_maximum_and_clip_gradient_masks():
    x = Tensor(np.array([-2.0, 0.5, 3.0]), requires_grad=True)
    out = ag.asum(ag.maximum(x, Tensor(np.asarray(1.0))))
    out.backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    y = Tensor(np.array([-20.0, 0.5, 20.0]), requires_grad=True)
    out = ag.asum(ag.clip(y, -12.0, 12.0))
    out.backward()
    np.testing.assert_array_equal(y.grad, [0.0, 1.0, 0.0])
    np.testing.assert_array_equal(ag.clip(y, -12.0, 12.0).data, [-12.0, 0.5, 12.0])


def test_l2_norm_gradient(rng):
    x0 = rng.standard_normal(7)
    leaf = Tensor(x0.copy(), requires_grad=True)
    ag.l2_norm(leaf).backward()
    x_work = x0.copy()
    num = numeric_grad(lambda: float(ag.l2_norm(Tensor(x_work)).data), x_work)
    assert_grads_close(leaf.grad, num)
    # origin: finite subgradient
    zero = Tensor(np.zeros(4), requires_grad=True)
    ag.l2_norm(zero).backward()
    np.testing.assert_array_equal(zero.grad, np.zeros(4))


def test_constant_subgraphs_are_skipped():
    const = Tensor(np.ones(3))
    leaf = Tensor(np.ones(3), requires_grad=True)
    out = ag.asum(const * leaf + const)
    assert out.requires_grad
    out.backward()
    assert leaf.grad is not None
    assert const.grad is None


def test_backward_accumulates_shared_nodes():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x + x * x  # x used twice through shared children
    y.backward()
    np.testing.assert_allclose(x.grad, [8.0])
