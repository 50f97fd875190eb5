"""Shared fixtures and the finite-difference gradient harness."""

from __future__ import annotations

import numpy as np
import pytest

from robustvae import ModelConfig, VaeModel

FD_STEP = 1e-5
FD_REL_TOL = 1e-4


def numeric_grad(f, arr: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of scalar f w.r.t. every entry of arr.

    ``arr`` is mutated in place during probing and restored afterwards, so
    closures over it see the perturbed values.
    """
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def assert_grads_close(analytic: np.ndarray, numeric: np.ndarray, rel_tol: float = FD_REL_TOL, floor: float = 1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    worst = float(rel.max()) if rel.size else 0.0
    assert worst <= rel_tol, f"gradient mismatch: worst rel err {worst:.3e}"


def check_param_grads(model: VaeModel, loss_fn, rel_tol: float = FD_REL_TOL):
    """Compare autograd parameter gradients of ``loss_fn(leaves) -> Tensor``
    against central differences over every trainable parameter."""
    leaves = model.leaves(requires_grad=True)
    loss = loss_fn(leaves)
    loss.backward()
    analytic = {name: leaves[name].grad for name in model.store.trainable_names()}

    def value() -> float:
        frozen = model.leaves(requires_grad=False)
        return float(loss_fn(frozen).data)

    for name in model.store.trainable_names():
        arr = model.store[name]  # live array; in-place probing skips f32 snap
        num = numeric_grad(value, arr)
        ana = analytic[name] if analytic[name] is not None else np.zeros_like(arr)
        assert_grads_close(ana, num, rel_tol=rel_tol)


def tiny_model(L=1, z_dims=(3,), data_dim=12, hidden=(6,), seed=0, dataset_size=16, **kwargs) -> VaeModel:
    cfg = ModelConfig(
        data_dim=data_dim,
        L=L,
        z_dims=z_dims,
        enc_hidden=hidden,
        dec_hidden=hidden,
        dataset_size=dataset_size,
        **kwargs,
    )
    return VaeModel(cfg, seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
