"""MLP module contracts: shapes, determinism, counts, gradients."""

import numpy as np
import pytest

import robustvae.autograd as ag
from robustvae.autograd import Tensor
from robustvae.distributions import LOG_VAR_MAX, LOG_VAR_MIN, log_prob_diag
from robustvae.errors import NumericError
from robustvae.nets import Mlp, MlpSpec, ParamStore, gaussian_head

from conftest import assert_grads_close, numeric_grad


def build(spec: MlpSpec, seed=0, name="net"):
    store = ParamStore()
    net = Mlp(name, spec, store, np.random.Generator(np.random.PCG64(seed)))
    store.freeze()
    return net, store


def test_zero_final_layer_gives_zero_output(rng):
    spec = MlpSpec(in_dim=5, hidden=(7,), out_dim=3)
    net, store = build(spec)
    store["net.w1"] = np.zeros((7, 3))
    store["net.b1"] = np.zeros(3)
    out = net.forward(rng.standard_normal((4, 5)), store.leaves(False))
    np.testing.assert_array_equal(out.data, np.zeros((4, 3)))


def test_identity_linear_layer(rng):
    spec = MlpSpec(in_dim=4, hidden=(), out_dim=4)
    net, store = build(spec)
    store["net.w0"] = np.eye(4)
    store["net.b0"] = np.zeros(4)
    x = rng.standard_normal((3, 4))
    out = net.forward(x, store.leaves(False))
    np.testing.assert_array_equal(out.data, x)


def test_param_count_matches_analytic():
    spec = MlpSpec(in_dim=10, hidden=(8, 6), out_dim=4)
    net, store = build(spec)
    expected = 10 * 8 + 8 + 8 * 6 + 6 + 6 * 4 + 4
    assert spec.param_count() == expected
    assert store.total_count() == expected

    bn_spec = MlpSpec(in_dim=10, hidden=(8, 6), out_dim=4, batch_norm=True)
    net, store = build(bn_spec)
    assert store.total_count() == bn_spec.param_count(include_buffers=True)
    assert bn_spec.param_count(include_buffers=True) == expected + 4 * (8 + 6)


def test_same_seed_bit_equal_parameters():
    spec = MlpSpec(in_dim=6, hidden=(5,), out_dim=2)
    _, store_a = build(spec, seed=33)
    _, store_b = build(spec, seed=33)
    for name in store_a.names():
        np.testing.assert_array_equal(store_a[name], store_b[name])
    _, store_c = build(spec, seed=34)
    assert any(not np.array_equal(store_a[n], store_c[n]) for n in store_a.names())


def test_forward_width_mismatch(rng):
    net, store = build(MlpSpec(in_dim=5, hidden=(4,), out_dim=2))
    with pytest.raises(ValueError):
        net.forward(rng.standard_normal((3, 6)), store.leaves(False))


def test_forward_nonfinite_names_layer(rng):
    net, store = build(MlpSpec(in_dim=3, hidden=(4,), out_dim=2))
    store["net.w1"] = np.full((4, 2), 1e308)
    store["net.b1"] = np.full(2, 1e308)
    with pytest.raises(NumericError, match="net.w1"):
        net.forward(np.full((2, 3), 1e30), store.leaves(False))


def test_forward_gradient_matches_finite_differences(rng):
    spec = MlpSpec(in_dim=4, hidden=(5,), out_dim=3)
    net, store = build(spec, seed=5)
    x = rng.standard_normal((6, 4))

    leaves = store.leaves(True)
    loss = ag.amean(net.forward(x, leaves))
    loss.backward()
    for name in store.trainable_names():
        arr = store[name]
        num = numeric_grad(lambda: float(ag.amean(net.forward(x, store.leaves(False))).data), arr)
        assert_grads_close(leaves[name].grad, num)

    # and with batch norm in train mode
    bn_spec = MlpSpec(in_dim=4, hidden=(5,), out_dim=3, batch_norm=True)
    bn_net, bn_store = build(bn_spec, seed=6, name="bnnet")
    rmean0 = bn_store["bnnet.bn0.rmean"].copy()
    leaves = bn_store.leaves(True)
    loss = ag.amean(ag.square(bn_net.forward(x, leaves, train=True)))
    loss.backward()
    assert not np.array_equal(bn_store["bnnet.bn0.rmean"], rmean0)  # running stats move
    for name in ("bnnet.w0", "bnnet.bn0.gamma", "bnnet.bn0.beta", "bnnet.w1"):
        arr = bn_store[name]
        rm, rv = bn_store["bnnet.bn0.rmean"].copy(), bn_store["bnnet.bn0.rvar"].copy()

        def value():
            out = float(ag.amean(ag.square(bn_net.forward(x, bn_store.leaves(False), train=True))).data)
            bn_store["bnnet.bn0.rmean"] = rm  # keep probing side-effect free
            bn_store["bnnet.bn0.rvar"] = rv
            return out

        num = numeric_grad(value, arr)
        assert_grads_close(leaves[name].grad, num)


def test_batch_norm_eval_uses_running_stats(rng):
    spec = MlpSpec(in_dim=3, hidden=(4,), out_dim=2, batch_norm=True)
    net, store = build(spec, seed=7)
    x = rng.standard_normal((8, 3))
    for _ in range(5):
        net.forward(x, store.leaves(False), train=True)
    eval_a = net.forward(x, store.leaves(False), train=False).data
    eval_b = net.forward(x, store.leaves(False), train=False).data
    np.testing.assert_array_equal(eval_a, eval_b)  # eval mode has no side effects


# ----------------------------------------------------------------------
# gaussian head
# ----------------------------------------------------------------------

def test_gaussian_head_zero_output_is_standard_normal():
    head = gaussian_head(np.zeros((2, 6)))
    np.testing.assert_array_equal(np.asarray(head.mean), np.zeros((2, 3)))
    np.testing.assert_array_equal(np.asarray(head.log_var), np.zeros((2, 3)))


def test_gaussian_head_mean_passthrough_unit_variance(rng):
    mu = rng.standard_normal((4, 3))
    out = np.concatenate([mu, np.zeros((4, 3))], axis=1)
    head = gaussian_head(out)
    np.testing.assert_array_equal(np.asarray(head.mean), mu)
    np.testing.assert_array_equal(np.asarray(head.log_var), np.zeros((4, 3)))


def test_gaussian_head_clamps_log_var():
    out = np.concatenate([np.zeros((1, 2)), np.array([[50.0, -50.0]])], axis=1)
    head = gaussian_head(out)
    np.testing.assert_array_equal(np.asarray(head.log_var), [[LOG_VAR_MAX, LOG_VAR_MIN]])


def test_gaussian_head_odd_width_rejected():
    with pytest.raises(ValueError):
        gaussian_head(np.zeros((2, 5)))


def test_gaussian_head_density_at_mode(rng):
    raw = rng.standard_normal((1, 8))
    head = gaussian_head(raw)
    lp = log_prob_diag(head, np.asarray(head.mean))
    expected = -0.5 * float(np.sum(np.log(2 * np.pi) + np.asarray(head.log_var)))
    assert float(lp) == pytest.approx(expected, abs=1e-12)


def test_store_f32_snap_round_trip():
    store = ParamStore()
    store.create("w", np.array([0.1, 0.2, 0.3]))
    flat = store.flat_f32()
    store.load_flat_f32(flat)
    np.testing.assert_array_equal(store.flat_f32(), flat)
    np.testing.assert_array_equal(store["w"], flat.astype(np.float64))
