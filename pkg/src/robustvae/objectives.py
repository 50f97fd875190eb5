"""Training objectives: plain, TC-regularised, and hierarchical ELBOs.

Estimator conventions
---------------------
* Gaussian-vs-Gaussian KL terms (per-layer chain KLs and the top-layer prior
  KL) are always computed in closed form at the sampled conditioning values.
  This makes the single-layer reductions exact: the hierarchical objective at
  L=1 equals the TC objective, which at beta=1 equals the plain ELBO, on
  shared noise.
* The total-correlation penalty on the top layer uses the minibatch-weighted
  aggregate-density estimator: for each sample k,
  ``log q^(z_k) = logsumexp_j log q(z_k | parent_j) - log(N*M)``, with the
  per-dimension analogue for the product-of-marginals term.  The estimator is
  biased low for finite M; large batches reduce the bias.
* In the decomposed hierarchical form, the mutual-information and TC terms
  use their natural minibatch estimators and the dimension-wise prior KL is
  defined as the remainder of the closed-form top-layer KL, so the five
  components sum to the compact objective exactly.

All objectives take explicit per-layer noise so identical samples can be
shared across objectives in equality tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .distributions import (
    DiagGaussian,
    LOG_2PI,
    kl_diag_per_dim,
    log_likelihood,
    log_prob_diag,
)
from .errors import ConfigError, NumericError
from .models import LatentChain, VaeModel

OBJECTIVES = ("vanilla", "beta-tc", "seatbelt")


@dataclass
class MinibatchContext:
    """Bookkeeping for aggregate-posterior estimation.

    ``M`` is the minibatch size, ``N`` the dataset size the batch was drawn
    from.  ``indices``/``seed`` record how the batch was sampled.
    """

    M: int
    N: int
    indices: np.ndarray | None = None
    seed: int | None = None

    def __post_init__(self):
        if not 1 <= self.M <= self.N:
            raise ValueError(f"need 1 <= M <= N, got M={self.M}, N={self.N}")


@dataclass
class ObjectiveReport:
    """Scalar summary of one objective evaluation (all plain floats).

    ``kl_terms`` holds the closed-form per-layer KLs, bottom to top (the top
    entry is the prior KL of the last layer).  For the decomposed
    hierarchical form, ``total`` equals
    ``reconstruction - sum(kl_terms[:-1]) - mi_estimate - beta * tc_estimate
    - dimwise_kl``.
    """

    total: float
    reconstruction: float
    kl_terms: list[float]
    tc_estimate: float = 0.0
    mi_estimate: float = 0.0
    dimwise_kl: float = 0.0
    beta: float = 1.0

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "reconstruction": self.reconstruction,
            "kl_terms": list(self.kl_terms),
            "tc_estimate": self.tc_estimate,
            "mi_estimate": self.mi_estimate,
            "dimwise_kl": self.dimwise_kl,
            "beta": self.beta,
        }


def free_bits_apply(kl_per_dim, threshold: float):
    """Elementwise floor on per-dimension KL contributions.

    Gradients flow only through entries strictly above the threshold; floored
    entries contribute a constant.
    """
    if threshold < 0:
        raise ValueError("free-bits threshold must be >= 0")
    if isinstance(kl_per_dim, Tensor):
        return ag.maximum(kl_per_dim, Tensor(np.asarray(float(threshold))))
    return np.maximum(np.asarray(kl_per_dim, dtype=np.float64), threshold)


def mws_log_q_aggregate(z, cond: DiagGaussian, ctx: MinibatchContext):
    """Minibatch-weighted estimates of aggregate log densities.

    Parameters
    ----------
    z : (M, k) samples, sample ``k`` drawn from conditional row ``k``.
    cond : batched DiagGaussian of the M conditionals.
    ctx : minibatch context carrying M and dataset size N.

    Returns
    -------
    joint : (M,) estimates of log q^(z_k) = logsumexp_j log q(z_k|.j) - log(NM)
    per_dim : (M, k) the same per latent coordinate.
    """
    z_t = ag.as_tensor(z)
    if z_t.ndim != 2:
        raise ValueError("z must be a (M, k) batch of samples")
    M = z_t.shape[0]
    if M == 0:
        raise ValueError("empty minibatch")
    if ctx.M != M:
        raise ValueError(f"ctx.M={ctx.M} does not match batch size {M}")
    mu = ag.as_tensor(cond.mean)
    lv = ag.as_tensor(cond.log_var)
    if mu.shape != z_t.shape:
        raise ValueError("conditional parameters must match sample shape")
    k = z_t.shape[1]
    zr = ag.reshape(z_t, (M, 1, k))
    mur = ag.reshape(mu, (1, M, k))
    lvr = ag.reshape(lv, (1, M, k))
    # (M, M, k): log density of sample k's coordinate d under conditional j
    log_pair = -0.5 * (LOG_2PI + lvr + ag.square(zr - mur) * ag.exp(-lvr))
    log_nm = math.log(ctx.N * ctx.M)
    joint = ag.logsumexp(ag.asum(log_pair, axis=2), axis=1) - log_nm
    per_dim = ag.logsumexp(log_pair, axis=1) - log_nm
    plain = not (isinstance(z, Tensor) or isinstance(cond.mean, Tensor))
    if plain:
        return joint.data, per_dim.data
    return joint, per_dim


# ----------------------------------------------------------------------
# shared ELBO core
# ----------------------------------------------------------------------

def _normalize_eps(model: VaeModel, x, eps) -> list:
    if eps is None:
        raise ValueError("objectives require explicit noise vectors")
    if isinstance(eps, np.ndarray):
        eps = [eps]
    if len(eps) != model.L:
        raise ValueError(f"expected {model.L} noise arrays, got {len(eps)}")
    batch_shape = np.asarray(x).shape[:-1]
    for i, e in enumerate(eps):
        want = batch_shape + (model.config.z_dims[i],)
        if np.asarray(e).shape != want:
            raise ValueError(f"eps[{i}] has shape {np.asarray(e).shape}, expected {want}")
    return list(eps)


def _chain_kl_terms(model: VaeModel, chain: LatentChain, leaves, train: bool):
    """Closed-form per-layer KL contributions, batch-averaged, per dimension.

    Layers 1..L-1 are measured against the generative conditionals
    p(z^l | z^{l+1}); the top layer against the isotropic prior.
    Returns a list of per-dimension tensors (each shape (z_l,)).
    """
    per_layer = []
    gen_conds = model.generative_conditionals(chain, leaves=leaves, train=train)
    for l in range(model.L - 1):
        kl_pd = kl_diag_per_dim(chain.posteriors[l], gen_conds[l])
        kl_pd = ag.as_tensor(kl_pd)
        if kl_pd.ndim > 1:
            kl_pd = ag.amean(kl_pd, axis=0)
        per_layer.append(kl_pd)
    top = chain.posteriors[-1]
    prior = DiagGaussian.standard(model.config.z_dims[-1])
    kl_top = ag.as_tensor(kl_diag_per_dim(top, prior))
    if kl_top.ndim > 1:
        kl_top = ag.amean(kl_top, axis=0)
    per_layer.append(kl_top)
    return per_layer


def _elbo_core(
    model: VaeModel,
    x: np.ndarray,
    beta: float,
    ctx: MinibatchContext | None,
    eps,
    free_bits: float,
    leaves,
    train: bool,
    decomposed: bool,
):
    if beta < 1.0:
        raise ConfigError("beta must be >= 1")
    if (beta > 1.0 or decomposed) and ctx is None:
        raise ConfigError("a MinibatchContext is required for TC estimation")
    if decomposed and model.L < 2:
        raise ConfigError("the decomposed form needs L >= 2")
    if decomposed and free_bits > 0:
        raise ConfigError("free bits are not supported in the decomposed form")
    eps = _normalize_eps(model, x, eps)
    if leaves is None:
        leaves = model.leaves(requires_grad=False)

    chain = model.infer_chain(x, eps=eps, leaves=leaves, train=train)
    lp = model.decode_likelihood(chain.samples, leaves=leaves, train=train)
    recon = ag.amean(ag.as_tensor(log_likelihood(lp, x)))

    kl_per_dim = _chain_kl_terms(model, chain, leaves, train)
    kl_layer_values = [float(ag.asum(k).data) for k in kl_per_dim]
    if free_bits > 0:
        kl_per_dim = [free_bits_apply(k, free_bits) for k in kl_per_dim]
    kl_sum = ag.as_tensor(0.0)
    for k in kl_per_dim:
        kl_sum = kl_sum + ag.asum(k)

    need_tc = beta > 1.0 or decomposed
    tc = ag.as_tensor(0.0)
    joint_mix = None
    if need_tc:
        z_top = ag.as_tensor(chain.samples[-1])
        if z_top.ndim != 2:
            raise ValueError("TC estimation needs a batched input")
        joint, per_dim = mws_log_q_aggregate(z_top, chain.posteriors[-1], ctx)
        # Shift the -log(NM) weighted estimates to batch-mixture log
        # densities, log (1/M) sum_j q(.|parent_j).  The raw -log(NM)
        # normalisations do not cancel between the joint term and the D
        # marginal terms; after the shift the penalty estimates the total
        # correlation itself (the gradient is unchanged by the constant).
        log_n = math.log(ctx.N)
        joint_mix = ag.as_tensor(joint) + log_n
        per_dim_mix = ag.as_tensor(per_dim) + log_n
        tc = ag.amean(joint_mix - ag.asum(per_dim_mix, axis=1))

    if not decomposed:
        total = recon - kl_sum - (beta - 1.0) * tc
        report = ObjectiveReport(
            total=float(total.data),
            reconstruction=float(recon.data),
            kl_terms=kl_layer_values,
            tc_estimate=float(tc.data),
            beta=float(beta),
        )
    else:
        log_q_top = ag.as_tensor(
            log_prob_diag(chain.posteriors[-1], chain.samples[-1])
        )
        mi = ag.amean(log_q_top - joint_mix)
        kl_top = ag.asum(kl_per_dim[-1])
        dimwise = kl_top - mi - tc
        inter = ag.as_tensor(0.0)
        for k in kl_per_dim[:-1]:
            inter = inter + ag.asum(k)
        total = recon - inter - mi - beta * tc - dimwise
        report = ObjectiveReport(
            total=float(total.data),
            reconstruction=float(recon.data),
            kl_terms=kl_layer_values,
            tc_estimate=float(tc.data),
            mi_estimate=float(mi.data),
            dimwise_kl=float(dimwise.data),
            beta=float(beta),
        )
    if not np.isfinite(report.total):
        raise NumericError("objective evaluated to a non-finite value")
    return ag.unwrap(total), report


# ----------------------------------------------------------------------
# public objectives
# ----------------------------------------------------------------------

def elbo_vanilla(model: VaeModel, x, eps, free_bits: float = 0.0, leaves=None, train: bool = False):
    """Single-sample ELBO with closed-form prior KL; requires L == 1."""
    if model.L != 1:
        raise ConfigError("elbo_vanilla requires a single-layer model")
    return _elbo_core(model, x, 1.0, None, eps, free_bits, leaves, train, decomposed=False)


def beta_tc_elbo(
    model: VaeModel,
    x,
    beta: float,
    ctx: MinibatchContext,
    eps,
    free_bits: float = 0.0,
    leaves=None,
    train: bool = False,
):
    """TC-penalised ELBO: ELBO - (beta - 1) * TC^(z); requires L == 1."""
    if model.L != 1:
        raise ConfigError("beta_tc_elbo requires a single-layer model")
    return _elbo_core(model, x, beta, ctx, eps, free_bits, leaves, train, decomposed=False)


def seatbelt_elbo(
    model: VaeModel,
    x,
    beta: float,
    ctx: MinibatchContext | None,
    eps,
    free_bits: float = 0.0,
    leaves=None,
    train: bool = False,
):
    """Hierarchical ELBO with the TC penalty on the top layer (any L >= 1)."""
    return _elbo_core(model, x, beta, ctx, eps, free_bits, leaves, train, decomposed=False)


def seatbelt_elbo_decomposed(
    model: VaeModel,
    x,
    beta: float,
    ctx: MinibatchContext,
    eps,
    leaves=None,
    train: bool = False,
):
    """Five-term decomposition of the hierarchical objective (L >= 2).

    Components: reconstruction; intermediate chain KLs; top-layer
    mutual-information term; beta-weighted TC term; dimension-wise prior KL.
    Their signed sum equals the compact objective on the same samples.
    """
    return _elbo_core(model, x, beta, ctx, eps, 0.0, leaves, train, decomposed=True)


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Optimisation settings for one training run."""

    objective: str = "vanilla"
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")


@dataclass
class TrainResult:
    trace: list[ObjectiveReport]
    initial: ObjectiveReport
    diverged: bool = False
    epochs_run: int = 0


class Adam:
    """Adaptive-moment optimizer (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, names: Sequence[str], lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.names = list(names)
        self.lr = lr
        self.b1, self.b2, self.eps = b1, b2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, store, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1t = 1.0 - self.b1**self.t
        b2t = 1.0 - self.b2**self.t
        for name in self.names:
            g = grads.get(name)
            if g is None:
                continue
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros_like(g)
                v = np.zeros_like(g)
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * (g * g)
            self.m[name], self.v[name] = m, v
            update = self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            store[name] = store[name] - update


def _objective_fn(name: str) -> Callable:
    return {
        "vanilla": lambda model, x, ctx, eps, leaves, train: elbo_vanilla(
            model, x, eps, free_bits=model.config.free_bits, leaves=leaves, train=train
        ),
        "beta-tc": lambda model, x, ctx, eps, leaves, train: beta_tc_elbo(
            model, x, model.config.beta, ctx, eps, free_bits=model.config.free_bits, leaves=leaves, train=train
        ),
        "seatbelt": lambda model, x, ctx, eps, leaves, train: seatbelt_elbo(
            model, x, model.config.beta, ctx, eps, free_bits=model.config.free_bits, leaves=leaves, train=train
        ),
    }[name]


def _mean_report(reports: list[ObjectiveReport]) -> ObjectiveReport:
    n = len(reports)
    kl = [float(np.mean([r.kl_terms[i] for r in reports])) for i in range(len(reports[0].kl_terms))]
    return ObjectiveReport(
        total=sum(r.total for r in reports) / n,
        reconstruction=sum(r.reconstruction for r in reports) / n,
        kl_terms=kl,
        tc_estimate=sum(r.tc_estimate for r in reports) / n,
        mi_estimate=sum(r.mi_estimate for r in reports) / n,
        dimwise_kl=sum(r.dimwise_kl for r in reports) / n,
        beta=reports[0].beta,
    )


def eval_objective(
    model: VaeModel,
    images: np.ndarray,
    objective: str,
    batch_size: int,
    seed: int,
    beta: float | None = None,
) -> ObjectiveReport:
    """Average an objective over a dataset without training (seeded noise)."""
    fn = _objective_fn(objective)
    rng = np.random.Generator(np.random.PCG64(seed))
    n = len(images)
    saved_beta = model.config.beta
    if beta is not None:
        model.config.beta = beta
    try:
        reports = []
        for start in range(0, n, batch_size):
            xb = images[start : start + batch_size]
            eps = [rng.standard_normal((len(xb), zd)) for zd in model.config.z_dims]
            ctx = MinibatchContext(M=len(xb), N=n)
            _, rep = fn(model, xb, ctx, eps, None, False)
            reports.append(rep)
    finally:
        model.config.beta = saved_beta
    return _mean_report(reports)


def train_run(
    model: VaeModel,
    images: np.ndarray,
    cfg: TrainConfig,
    checkpoint_dir=None,
) -> TrainResult:
    """Train in place with Adam; deterministic for a fixed seed.

    Incomplete trailing batches are dropped so the aggregate-posterior
    estimator always sees a constant batch size.  On divergence the last
    epoch-end parameters are restored.  If ``checkpoint_dir`` is given the
    final (or last-good) parameters are persisted there.
    """
    n = len(images)
    if cfg.batch_size > n:
        raise ConfigError(f"batch size {cfg.batch_size} exceeds dataset size {n}")
    fn = _objective_fn(cfg.objective)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    adam = Adam(model.store.trainable_names(), lr=cfg.lr)

    initial = eval_objective(
        model, images, cfg.objective, batch_size=cfg.batch_size, seed=cfg.seed
    )

    trace: list[ObjectiveReport] = []
    snapshot = model.store.flat_f32()
    diverged = False
    epochs_run = 0
    steps_per_epoch = n // cfg.batch_size
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        step_reports = []
        try:
            for s in range(steps_per_epoch):
                idx = perm[s * cfg.batch_size : (s + 1) * cfg.batch_size]
                xb = images[idx]
                eps = [rng.standard_normal((len(xb), zd)) for zd in model.config.z_dims]
                ctx = MinibatchContext(M=len(xb), N=n, indices=idx, seed=cfg.seed)
                leaves = model.leaves(requires_grad=True)
                total, rep = fn(model, xb, ctx, eps, leaves, True)
                loss = ag.neg(total)
                loss.backward()
                grads = {name: leaf.grad for name, leaf in leaves.items() if leaf.grad is not None}
                adam.step(model.store, grads)
                step_reports.append(rep)
        except NumericError:
            model.store.load_flat_f32(snapshot)
            diverged = True
            break
        trace.append(_mean_report(step_reports))
        snapshot = model.store.flat_f32()
        epochs_run = epoch + 1

    if checkpoint_dir is not None:
        from .data import save_checkpoint

        save_checkpoint(
            model,
            checkpoint_dir,
            training={
                "seed": cfg.seed,
                "epoch": epochs_run,
                "objective": cfg.objective,
                "diverged": diverged,
            },
        )
    return TrainResult(trace=trace, initial=initial, diverged=diverged, epochs_run=epochs_run)
