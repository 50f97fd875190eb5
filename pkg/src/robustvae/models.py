"""Model families: single-layer VAEs and the all-layers-conditioned hierarchy.

One class covers all three variants.  With ``L == 1`` the model is a plain
VAE (the training objective decides whether it is TC-regularised).  With
``L > 1`` the inference network is a chain q(z1|x) q(z2|z1) ... and the
generative model is either

* deep-latent-Gaussian style (``decoder_all_layers=False``): the likelihood
  sees only the bottom latent, or
* seatbelt style (default): the likelihood is conditioned on the
  concatenation of every layer's latent.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .distributions import (
    DiagGaussian,
    LikelihoodParams,
    likelihood_mean,
    log_likelihood,
    log_prob_diag,
    reparam_sample,
)
from .errors import ConfigError
from .nets import Mlp, MlpSpec, ParamStore, gaussian_head

#: Hidden width used by the layer-to-layer link networks, decreasing with
#: layer index (both inference and generative links share the schedule).
LINK_HIDDEN_SCHEDULE = (64, 48, 32, 24, 16)

LIKELIHOOD_FAMILIES = ("bernoulli-logits", "gaussian-fixed-variance")


def _unwrap_gauss(g: DiagGaussian) -> DiagGaussian:
    mean, log_var = ag.unwrap(g.mean), ag.unwrap(g.log_var)
    if mean is g.mean and log_var is g.log_var:
        return g
    return DiagGaussian(mean, log_var)


def default_z_dims(L: int) -> tuple[int, ...]:
    """Desk-scale latent widths: the last L entries of a fixed decreasing list."""
    table = (96, 48, 24, 12, 6)
    if not 1 <= L <= len(table):
        raise ConfigError(f"L must be in 1..{len(table)}")
    if L == 1:
        return (8,)
    return table[-L:]


@dataclass
class ModelConfig:
    """Static description of a model; everything needed to rebuild it."""

    data_dim: int = 1024
    L: int = 1
    z_dims: tuple[int, ...] = (8,)
    beta: float = 1.0
    likelihood: str = "bernoulli-logits"
    fixed_sigma: float = 1.0
    enc_hidden: tuple[int, ...] = (128, 128)
    dec_hidden: tuple[int, ...] = (128, 128)
    free_bits: float = 0.0
    dataset_size: int = 1
    decoder_all_layers: bool = True
    batch_norm: bool = False
    leaky_slope: float = 0.2

    def __post_init__(self):
        self.z_dims = tuple(int(z) for z in self.z_dims)
        self.enc_hidden = tuple(int(h) for h in self.enc_hidden)
        self.dec_hidden = tuple(int(h) for h in self.dec_hidden)
        if self.L < 1:
            raise ConfigError("L must be >= 1")
        if len(self.z_dims) != self.L:
            raise ConfigError(f"z_dims has {len(self.z_dims)} entries for L={self.L}")
        if any(z < 1 for z in self.z_dims):
            raise ConfigError("latent widths must be positive")
        if any(a < b for a, b in zip(self.z_dims[:-1], self.z_dims[1:])):
            raise ConfigError("z_dims must be non-increasing along the chain")
        if self.beta < 1.0:
            raise ConfigError("beta must be >= 1")
        if self.likelihood not in LIKELIHOOD_FAMILIES:
            raise ConfigError(f"unknown likelihood family {self.likelihood!r}")
        if self.free_bits < 0:
            raise ConfigError("free_bits must be >= 0")
        if self.data_dim < 1 or self.dataset_size < 1:
            raise ConfigError("data_dim and dataset_size must be positive")
        if self.L > len(LINK_HIDDEN_SCHEDULE):
            raise ConfigError(f"L={self.L} exceeds the link schedule length")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("z_dims", "enc_hidden", "dec_hidden"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class LatentChain:
    """Per-layer posterior parameters and reparameterised samples."""

    posteriors: list[DiagGaussian]
    samples: list

    def __post_init__(self):
        if len(self.posteriors) != len(self.samples):
            raise ValueError("posteriors and samples must have equal length")
        for q, z in zip(self.posteriors, self.samples):
            z_dim = (z.data if isinstance(z, Tensor) else np.asarray(z)).shape[-1]
            if z_dim != q.dim:
                raise ValueError("sample dimension does not match its posterior")

    @property
    def L(self) -> int:
        return len(self.posteriors)


class VaeModel:
    """A built model: parameter store plus the encoder/decoder/link networks."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = int(seed)
        self.store = ParamStore()
        rng = np.random.Generator(np.random.PCG64(self.seed))
        c = config

        def mlp(name: str, in_dim: int, hidden: Sequence[int], out_dim: int) -> Mlp:
            spec = MlpSpec(
                in_dim=in_dim,
                hidden=tuple(hidden),
                out_dim=out_dim,
                leaky_slope=c.leaky_slope,
                batch_norm=c.batch_norm,
            )
            return Mlp(name, spec, self.store, rng)

        self.encoder = mlp("enc", c.data_dim, c.enc_hidden, 2 * c.z_dims[0])
        self.q_links: list[Mlp] = []
        self.p_links: list[Mlp] = []
        for j in range(c.L - 1):
            w = LINK_HIDDEN_SCHEDULE[j]
            self.q_links.append(mlp(f"qlink{j}", c.z_dims[j], (w, w), 2 * c.z_dims[j + 1]))
        for j in range(c.L - 1):
            w = LINK_HIDDEN_SCHEDULE[j]
            self.p_links.append(mlp(f"plink{j}", c.z_dims[j + 1], (w, w), 2 * c.z_dims[j]))
        dec_in = sum(c.z_dims) if c.decoder_all_layers else c.z_dims[0]
        self.decoder = mlp("dec", dec_in, c.dec_hidden, c.data_dim)
        self.store.freeze()

    # ------------------------------------------------------------------
    @property
    def L(self) -> int:
        return self.config.L

    def num_params(self) -> int:
        return self.store.total_count()

    def leaves(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return self.store.leaves(requires_grad=requires_grad)

    def encoder_side_names(self) -> list[str]:
        """All inference-network parameters (encoder plus inference links)."""
        names = list(self.encoder.param_names)
        for net in self.q_links:
            names.extend(net.param_names)
        return names

    def decoder_side_names(self) -> list[str]:
        """All generative-network parameters (decoder plus generative links)."""
        names = list(self.decoder.param_names)
        for net in self.p_links:
            names.extend(net.param_names)
        return names

    # ------------------------------------------------------------------
    def encode(self, x, leaves=None, train: bool = False) -> DiagGaussian:
        """q(z1 | x) as a DiagGaussian (batched if x is batched)."""
        if leaves is None:
            leaves = self.leaves(requires_grad=False)
        head = gaussian_head(self.encoder.forward(x, leaves, train=train))
        return _unwrap_gauss(head)

    def infer_chain(self, x, eps: Sequence | None = None, leaves=None, train: bool = False) -> LatentChain:
        """Run the inference chain; ``eps=None`` uses zero noise (mean chain)."""
        if leaves is None:
            leaves = self.leaves(requires_grad=False)
        x_arr = x.data if isinstance(x, Tensor) else np.asarray(x)
        batch_shape = x_arr.shape[:-1]
        if eps is not None and len(eps) != self.L:
            raise ValueError(f"expected {self.L} noise vectors, got {len(eps)}")
        posteriors: list[DiagGaussian] = []
        samples: list = []
        q = self.encode(x, leaves=leaves, train=train)
        for i in range(self.L):
            if i > 0:
                q = _unwrap_gauss(
                    gaussian_head(self.q_links[i - 1].forward(samples[i - 1], leaves, train=train))
                )
            e = (
                np.zeros(batch_shape + (self.config.z_dims[i],))
                if eps is None
                else eps[i]
            )
            posteriors.append(q)
            samples.append(ag.unwrap(reparam_sample(q, e)))
        return LatentChain(posteriors=posteriors, samples=samples)

    # ------------------------------------------------------------------
    def decode_likelihood(self, samples: Sequence, leaves=None, train: bool = False) -> LikelihoodParams:
        """Likelihood parameters from layer samples (all layers or bottom only)."""
        if leaves is None:
            leaves = self.leaves(requires_grad=False)
        if self.config.decoder_all_layers and self.L > 1:
            dec_in = ag.concat([ag.as_tensor(z) for z in samples], axis=-1)
        else:
            dec_in = ag.as_tensor(samples[0])
        params = ag.unwrap(self.decoder.forward(dec_in, leaves, train=train))
        return LikelihoodParams(self.config.likelihood, params, self.config.fixed_sigma)

    def generative_logjoint(self, x, chain: LatentChain, leaves=None, train: bool = False):
        """log p(x, z1..zL): likelihood + chain priors + isotropic top prior."""
        if chain.L != self.L:
            raise ValueError(f"chain has {chain.L} layers, model has {self.L}")
        for i, z in enumerate(chain.samples):
            z_dim = (z.data if isinstance(z, Tensor) else np.asarray(z)).shape[-1]
            if z_dim != self.config.z_dims[i]:
                raise ValueError(f"layer {i + 1} sample width {z_dim} != {self.config.z_dims[i]}")
        if leaves is None:
            leaves = self.leaves(requires_grad=False)
        lp = self.decode_likelihood(chain.samples, leaves=leaves, train=train)
        total = ag.as_tensor(log_likelihood(lp, x))
        for j in range(self.L - 1):
            cond = gaussian_head(self.p_links[j].forward(chain.samples[j + 1], leaves, train=train))
            total = total + ag.as_tensor(log_prob_diag(cond, chain.samples[j]))
        prior = DiagGaussian.standard(self.config.z_dims[-1])
        total = total + ag.as_tensor(log_prob_diag(prior, chain.samples[-1]))
        return ag.unwrap(total)

    def generative_conditionals(self, chain: LatentChain, leaves=None, train: bool = False) -> list[DiagGaussian]:
        """p(z^i | z^{i+1}) evaluated at the chain's samples, for i = 1..L-1."""
        if leaves is None:
            leaves = self.leaves(requires_grad=False)
        return [
            _unwrap_gauss(gaussian_head(self.p_links[j].forward(chain.samples[j + 1], leaves, train=train)))
            for j in range(self.L - 1)
        ]

    # ------------------------------------------------------------------
    def reconstruct(self, x, leaves=None):
        """Deterministic reconstruction in [-1, 1] from the mean chain."""
        if leaves is None:
            leaves = self.leaves(requires_grad=False)
        chain = self.infer_chain(x, eps=None, leaves=leaves)
        lp = self.decode_likelihood(chain.samples, leaves=leaves)
        return ag.unwrap(ag.as_tensor(likelihood_mean(lp)))

    def chain_posteriors_mean(self, x, leaves=None) -> list[DiagGaussian]:
        """Per-layer posteriors along the deterministic (zero-noise) chain."""
        chain = self.infer_chain(x, eps=None, leaves=leaves)
        return chain.posteriors
