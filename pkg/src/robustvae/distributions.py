"""Closed-form probability primitives: diagonal Gaussians and likelihoods.

Every operation accepts either plain numpy arrays or autograd tensors and is
differentiable in the tensor case.  Vectors may carry a leading batch axis;
reductions always run over the final (unit) axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import autograd as ag
from .autograd import Tensor

LOG_2PI = math.log(2.0 * math.pi)

#: Clamp range for encoder log-variances; keeps exp() well conditioned and
#: posteriors non-degenerate.
LOG_VAR_MIN = -12.0
LOG_VAR_MAX = 12.0

ArrayOrTensor = Union[np.ndarray, Tensor]


def _plain(x: ArrayOrTensor) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _return_like(result: Tensor, *inputs) -> ArrayOrTensor:
    """Unwrap to a plain array when no input carried gradient structure."""
    if any(isinstance(x, Tensor) for x in inputs):
        return result
    return result.data


@dataclass
class DiagGaussian:
    """Mean / log-variance parameterisation of a diagonal Gaussian.

    Fields are vectors over latent units, optionally with a leading batch
    axis.  Log-variances are expected to lie in ``[LOG_VAR_MIN, LOG_VAR_MAX]``
    (the network heads clamp them).
    """

    mean: ArrayOrTensor
    log_var: ArrayOrTensor

    def __post_init__(self):
        m, lv = _plain(self.mean), _plain(self.log_var)
        if m.shape != lv.shape:
            raise ValueError(f"mean shape {m.shape} != log_var shape {lv.shape}")
        if m.shape[-1] < 1:
            raise ValueError("DiagGaussian needs at least one dimension")
        if not isinstance(self.mean, Tensor) and not isinstance(self.log_var, Tensor):
            if not (np.all(np.isfinite(m)) and np.all(np.isfinite(lv))):
                raise ValueError("DiagGaussian parameters must be finite")

    @property
    def dim(self) -> int:
        return _plain(self.mean).shape[-1]

    @classmethod
    def standard(cls, dim: int) -> "DiagGaussian":
        return cls(np.zeros(dim), np.zeros(dim))


def kl_diag(p: DiagGaussian, q: DiagGaussian) -> ArrayOrTensor:
    """KL(p || q) between diagonal Gaussians, in nats.

    Returns a scalar for vector inputs, or a length-B array for batched
    inputs.  Non-negative, and exactly 0 iff p == q.
    """
    per_dim = kl_diag_per_dim(p, q)
    total = ag.asum(per_dim if isinstance(per_dim, Tensor) else ag.as_tensor(per_dim), axis=-1)
    return _return_like(total, p.mean, p.log_var, q.mean, q.log_var)


def kl_diag_per_dim(p: DiagGaussian, q: DiagGaussian) -> ArrayOrTensor:
    """Per-dimension KL contributions (each term is a 1-D Gaussian KL >= 0)."""
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: p has {p.dim}, q has {q.dim}")
    pm, plv = ag.as_tensor(p.mean), ag.as_tensor(p.log_var)
    qm, qlv = ag.as_tensor(q.mean), ag.as_tensor(q.log_var)
    var_ratio = ag.exp(plv - qlv)
    mean_term = ag.square(pm - qm) * ag.exp(-qlv)
    out = 0.5 * (var_ratio + mean_term - 1.0 + qlv - plv)
    return _return_like(out, p.mean, p.log_var, q.mean, q.log_var)


def reparam_sample(d: DiagGaussian, eps: ArrayOrTensor) -> ArrayOrTensor:
    """mean + exp(log_var / 2) * eps; differentiable in the parameters."""
    eps_plain = _plain(eps)
    if eps_plain.shape != _plain(d.mean).shape:
        raise ValueError(
            f"eps shape {eps_plain.shape} does not match distribution shape {_plain(d.mean).shape}"
        )
    m, lv = ag.as_tensor(d.mean), ag.as_tensor(d.log_var)
    out = m + ag.exp(0.5 * lv) * ag.as_tensor(eps)
    return _return_like(out, d.mean, d.log_var, eps)


def log_prob_diag(d: DiagGaussian, z: ArrayOrTensor) -> ArrayOrTensor:
    """Exact diagonal-Gaussian log density at z, in nats."""
    z_plain = _plain(z)
    if z_plain.shape[-1] != d.dim:
        raise ValueError(f"z has dimension {z_plain.shape[-1]}, distribution has {d.dim}")
    m, lv = ag.as_tensor(d.mean), ag.as_tensor(d.log_var)
    zt = ag.as_tensor(z)
    per_dim = -0.5 * (LOG_2PI + lv + ag.square(zt - m) * ag.exp(-lv))
    out = ag.asum(per_dim, axis=-1)
    return _return_like(out, d.mean, d.log_var, z)


@dataclass
class LikelihoodParams:
    """Decoder output distribution p(x | z).

    ``bernoulli-logits`` treats ``params`` as pixel logits against binary
    targets obtained by mapping data from [-1, 1] to [0, 1].
    ``gaussian-fixed-variance`` treats ``params`` as the mean of a diagonal
    Gaussian with constant standard deviation ``fixed_sigma``.
    """

    family: str
    params: ArrayOrTensor
    fixed_sigma: float = field(default=1.0)

    FAMILIES = ("bernoulli-logits", "gaussian-fixed-variance")

    def __post_init__(self):
        if self.family not in self.FAMILIES:
            raise ValueError(f"unknown likelihood family {self.family!r}")
        if self.family == "gaussian-fixed-variance" and not self.fixed_sigma > 0:
            raise ValueError("fixed_sigma must be positive")


def log_likelihood(lp: LikelihoodParams, x: ArrayOrTensor) -> ArrayOrTensor:
    """log p(x | params) summed over pixels; x must lie in [-1, 1]."""
    x_plain = _plain(x)
    p_plain = _plain(lp.params)
    if x_plain.shape[-1] != p_plain.shape[-1]:
        raise ValueError(
            f"data dimension {x_plain.shape[-1]} does not match parameter dimension {p_plain.shape[-1]}"
        )
    if np.any(x_plain < -1.0 - 1e-9) or np.any(x_plain > 1.0 + 1e-9):
        raise ValueError("data must lie in [-1, 1]")
    xt = ag.as_tensor(x)
    params = ag.as_tensor(lp.params)
    if lp.family == "bernoulli-logits":
        targets = 0.5 * (xt + 1.0)
        # t*log(sig(l)) + (1-t)*log(1-sig(l)), in softplus form for stability
        per_pixel = -(targets * ag.softplus(-params) + (1.0 - targets) * ag.softplus(params))
    else:
        sigma2 = lp.fixed_sigma**2
        per_pixel = -0.5 * (LOG_2PI + math.log(sigma2) + ag.square(xt - params) / sigma2)
    out = ag.asum(per_pixel, axis=-1)
    return _return_like(out, x, lp.params)


def likelihood_mean(lp: LikelihoodParams) -> ArrayOrTensor:
    """Expected value of the likelihood mapped onto the data range [-1, 1]."""
    params = ag.as_tensor(lp.params)
    if lp.family == "bernoulli-logits":
        out = 2.0 * ag.sigmoid(params) - 1.0
    else:
        out = ag.clip(params, -1.0, 1.0)
    return _return_like(out, lp.params)
