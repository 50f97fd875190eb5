"""robustvae: train, attack, and evaluate regularised VAEs at desk scale."""

from .distributions import (
    DiagGaussian,
    LikelihoodParams,
    kl_diag,
    log_likelihood,
    log_prob_diag,
    reparam_sample,
)
from .models import LatentChain, ModelConfig, VaeModel, default_z_dims
from .nets import Mlp, MlpSpec, ParamStore, gaussian_head
from .objectives import (
    MinibatchContext,
    ObjectiveReport,
    TrainConfig,
    beta_tc_elbo,
    elbo_vanilla,
    eval_objective,
    free_bits_apply,
    mws_log_q_aggregate,
    seatbelt_elbo,
    seatbelt_elbo_decomposed,
    train_run,
)
from .attacks import (
    AttackResult,
    AttackSpec,
    attack_campaign,
    lambda_grid,
    latent_attack_loss,
    optimize_attack,
    output_attack_loss,
    seatbelt_attack_loss,
)
from .evaluation import (
    MetricRow,
    aggregate_campaign,
    denoise_density,
    elbo_unpenalized,
    neg_target_loglik,
    recon_l2,
    weight_l2_report,
)
from .data import (
    SpriteDataset,
    SpriteFactors,
    gen_sprites,
    load_checkpoint,
    render_sprite,
    save_checkpoint,
    split,
)

__version__ = "0.1.0"

__all__ = [
    "AttackResult",
    "AttackSpec",
    "DiagGaussian",
    "LatentChain",
    "LikelihoodParams",
    "MetricRow",
    "MinibatchContext",
    "Mlp",
    "MlpSpec",
    "ModelConfig",
    "ObjectiveReport",
    "ParamStore",
    "SpriteDataset",
    "SpriteFactors",
    "TrainConfig",
    "VaeModel",
    "aggregate_campaign",
    "attack_campaign",
    "beta_tc_elbo",
    "default_z_dims",
    "denoise_density",
    "elbo_unpenalized",
    "elbo_vanilla",
    "eval_objective",
    "free_bits_apply",
    "gaussian_head",
    "gen_sprites",
    "kl_diag",
    "lambda_grid",
    "latent_attack_loss",
    "load_checkpoint",
    "log_likelihood",
    "log_prob_diag",
    "mws_log_q_aggregate",
    "neg_target_loglik",
    "optimize_attack",
    "output_attack_loss",
    "recon_l2",
    "render_sprite",
    "reparam_sample",
    "save_checkpoint",
    "seatbelt_attack_loss",
    "seatbelt_elbo",
    "seatbelt_elbo_decomposed",
    "split",
    "train_run",
    "weight_l2_report",
]
