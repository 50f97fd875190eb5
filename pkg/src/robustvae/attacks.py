"""Adversarial objectives and the bounded attack optimizer.

The attacker perturbs an input ``x`` by a distortion ``d`` (kept inside the
data box ``x + d in [-1, 1]``) so that the model treats ``x + d`` like a
chosen target ``x_t``:

* latent modes: minimise the KL between posteriors of the distorted input and
  of the target (summed over a chosen subset of layers for hierarchies), plus
  ``lambda * ||d||_2``;
* output mode: minimise the L2 distance between the reconstruction of the
  distorted input and the target image, plus the same penalty.

Optimisation uses scipy's projected quasi-Newton method (L-BFGS-B) with the
box handled as bound constraints, starting from ``d = 0``.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import Bounds, minimize

from . import autograd as ag
from . import evaluation
from .autograd import Tensor
from .distributions import kl_diag
from .errors import ConfigError
from .models import VaeModel

MODES = ("latent", "latent-all-layers", "latent-top", "latent-bottom", "output")

#: Paper protocol: 50 lambda values, geometric from 2^-20 to 2^20.
LAMBDA_GRID_SIZE = 50
LAMBDA_EXP_RANGE = (-20.0, 20.0)


def lambda_grid(count: int = LAMBDA_GRID_SIZE) -> np.ndarray:
    """Geometric penalty grid; endpoints are exactly 2^-20 and 2^20."""
    lo, hi = LAMBDA_EXP_RANGE
    return np.power(2.0, np.linspace(lo, hi, count))


@dataclass
class AttackSpec:
    """One attack problem: original, target, penalty weight and budget."""

    x: np.ndarray
    x_target: np.ndarray
    lam: float
    mode: str = "latent"
    max_iters: int = 1000
    tol: float = 1e-9
    stochastic_seed: int | None = None  # None: deterministic mean-chain evaluation

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.x_target = np.asarray(self.x_target, dtype=np.float64)
        if self.x.shape != self.x_target.shape:
            raise ValueError("x and x_target must have the same shape")
        for name, v in (("x", self.x), ("x_target", self.x_target)):
            if np.any(v < -1 - 1e-9) or np.any(v > 1 + 1e-9):
                raise ValueError(f"{name} must lie inside the data box [-1, 1]")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.mode not in MODES:
            raise ValueError(f"unknown attack mode {self.mode!r}")


@dataclass
class AttackResult:
    """Converged attack: distortion, loss split, and optimizer telemetry."""

    d: np.ndarray
    x_star: np.ndarray
    final_loss: float
    kl_term: float
    d_norm: float
    neg_target_loglik: float
    iterations: int
    converged: bool
    diverged: bool
    trace: list[float] = field(default_factory=list)
    mode: str = "latent"
    lam: float = 1.0


def _layers_for_mode(mode: str, L: int) -> list[int]:
    if mode in ("latent", "latent-all-layers"):
        return list(range(1, L + 1))
    if mode == "latent-top":
        return [L]
    if mode == "latent-bottom":
        return [1]
    raise ValueError(f"mode {mode!r} has no layer set")


def _chain_eps(model: VaeModel, seed: int | None):
    """Noise for posterior evaluation; None keeps the deterministic mean chain."""
    if seed is None:
        return None
    rng = np.random.Generator(np.random.PCG64(seed))
    return [rng.standard_normal(zd) for zd in model.config.z_dims]


def latent_attack_loss(model: VaeModel, x, d, x_target, lam: float):
    """KL(q(z|x+d) || q(z|x_t)) + lam * ||d||_2 for single-layer models."""
    if model.L != 1:
        raise ConfigError("latent_attack_loss requires a single-layer model")
    return seatbelt_attack_loss(model, x, d, x_target, lam, layers=(1,))


def seatbelt_attack_loss(model: VaeModel, x, d, x_target, lam: float, layers, eps=None, leaves=None):
    """lam * ||d||_2 plus summed per-layer posterior KLs over ``layers``.

    Per-layer conditionals are evaluated along the chain driven by ``eps``
    (zero noise by default, shared between the distorted and target chains so
    the loss is exactly 0 at d = 0, x_t = x).
    """
    layers = sorted(set(int(i) for i in layers))
    if not layers:
        raise ValueError("layers must be non-empty")
    if layers[0] < 1 or layers[-1] > model.L:
        raise ValueError(f"layer indices must lie in 1..{model.L}")
    if leaves is None:
        leaves = model.leaves(requires_grad=False)
    d_t = ag.as_tensor(d)
    x_adv = ag.as_tensor(x) + d_t
    posts_adv = model.infer_chain(x_adv, eps=eps, leaves=leaves).posteriors
    posts_tgt = model.infer_chain(np.asarray(x_target), eps=eps, leaves=leaves).posteriors
    loss = ag.as_tensor(lam) * ag.l2_norm(d_t)
    for i in layers:
        loss = loss + ag.as_tensor(kl_diag(posts_adv[i - 1], posts_tgt[i - 1]))
    return ag.unwrap(loss)


def output_attack_loss(model: VaeModel, x, d, x_target, lam: float, leaves=None):
    """||reconstruct(x+d) - x_t||_2 + lam * ||d||_2 (mean reconstruction)."""
    if leaves is None:
        leaves = model.leaves(requires_grad=False)
    d_t = ag.as_tensor(d)
    x_adv = ag.as_tensor(x) + d_t
    recon = ag.as_tensor(model.reconstruct(x_adv, leaves=leaves))
    mismatch = ag.l2_norm(recon - ag.as_tensor(x_target))
    loss = mismatch + ag.as_tensor(lam) * ag.l2_norm(d_t)
    return ag.unwrap(loss)


def _loss_terms(model: VaeModel, spec: AttackSpec, d, leaves, eps):
    """(mismatch term, d-norm) for the spec's mode; both autograd-aware."""
    d_t = ag.as_tensor(d)
    d_norm = ag.l2_norm(d_t)
    x_adv = ag.as_tensor(spec.x) + d_t
    if spec.mode == "output":
        recon = ag.as_tensor(model.reconstruct(x_adv, leaves=leaves))
        term = ag.l2_norm(recon - ag.as_tensor(spec.x_target))
    else:
        layers = _layers_for_mode(spec.mode, model.L)
        posts_adv = model.infer_chain(x_adv, eps=eps, leaves=leaves).posteriors
        posts_tgt = model.infer_chain(spec.x_target, eps=eps, leaves=leaves).posteriors
        term = ag.as_tensor(0.0)
        for i in layers:
            term = term + ag.as_tensor(kl_diag(posts_adv[i - 1], posts_tgt[i - 1]))
    return term, d_norm


def optimize_attack(model: VaeModel, spec: AttackSpec) -> AttackResult:
    """Minimise the attack objective over d with x + d kept in the data box.

    Runs a bounded limited-memory quasi-Newton search from d = 0, stopping at
    ``max_iters`` iterations or when the relative loss change drops below
    ``tol``.  Non-finite evaluations flag the result as diverged and the
    best-so-far distortion is returned.
    """
    leaves = model.leaves(requires_grad=False)
    eps = _chain_eps(model, spec.stochastic_seed)
    trace: list[float] = []
    state = {"best_f": np.inf, "best_d": np.zeros_like(spec.x), "diverged": False}

    def fun(d_flat: np.ndarray):
        d = Tensor(d_flat, requires_grad=True)
        term, d_norm = _loss_terms(model, spec, d, leaves, eps)
        term = ag.as_tensor(term)
        nd = float(ag.value_of(d_norm))
        f = float(term.data) + spec.lam * nd
        if not np.isfinite(f):
            state["diverged"] = True
            trace.append(state["best_f"] if np.isfinite(state["best_f"]) else 1e30)
            return 1e30, np.zeros_like(d_flat)
        term.backward()
        g_term = d.grad if d.grad is not None else np.zeros_like(d_flat)
        if not np.all(np.isfinite(g_term)):
            state["diverged"] = True
            g_term = np.zeros_like(d_flat)
        if nd > 0.0:
            grad = g_term + spec.lam * (d_flat / nd)
        else:
            # minimum-norm subgradient of term + lam*||d|| at the origin:
            # zero when the penalty ball swallows the smooth gradient
            gn = float(np.linalg.norm(g_term))
            grad = g_term * max(0.0, 1.0 - spec.lam / gn) if gn > 0 else np.zeros_like(g_term)
        if f < state["best_f"]:
            state["best_f"] = f
            state["best_d"] = d_flat.copy()
        trace.append(state["best_f"])
        return f, grad.copy()

    lo = -1.0 - spec.x
    hi = 1.0 - spec.x
    res = minimize(
        fun,
        x0=np.zeros_like(spec.x),
        jac=True,
        method="L-BFGS-B",
        bounds=Bounds(lo, hi),
        options={"maxiter": spec.max_iters, "ftol": spec.tol, "gtol": 1e-12},
    )

    d_final = state["best_d"]
    term, d_norm = _loss_terms(model, spec, np.asarray(d_final), leaves, eps)
    term_v = float(ag.value_of(term))
    d_norm_v = float(ag.value_of(d_norm))
    final_loss = term_v + spec.lam * d_norm_v
    x_star = np.clip(spec.x + d_final, -1.0, 1.0)
    return AttackResult(
        d=d_final,
        x_star=x_star,
        final_loss=final_loss,
        kl_term=term_v,
        d_norm=d_norm_v,
        neg_target_loglik=evaluation.neg_target_loglik(model, spec.x_target, x_star),
        iterations=int(res.nit),
        converged=bool(res.success) and not state["diverged"],
        diverged=state["diverged"],
        trace=trace,
        mode=spec.mode,
        lam=spec.lam,
    )


# ----------------------------------------------------------------------
# campaigns
# ----------------------------------------------------------------------

@dataclass
class CampaignResult:
    rows: list
    n_cells: int
    n_completed: int
    n_failed: int
    out_dir: Path


def _cell_paths(out_dir: Path, pair: int, lam_idx: int) -> tuple[Path, Path]:
    cells = out_dir / "cells"
    return (
        cells / f"cell_p{pair:03d}_l{lam_idx:02d}.json",
        cells / f"d_p{pair:03d}_l{lam_idx:02d}.bin",
    )


def _run_cell(args):
    model, spec_kwargs, meta = args
    spec = AttackSpec(**spec_kwargs)
    result = optimize_attack(model, spec)
    row = evaluation.MetricRow(
        model_id=meta["model_id"],
        beta=model.config.beta,
        L=model.config.L,
        z_dims=model.config.z_dims,
        lam=spec.lam,
        pair=meta["pair"],
        delta=result.final_loss,
        neg_loglik=result.neg_target_loglik,
        l2_adv=evaluation.recon_l2(model, result.x_star, spec.x_target),
        l2_clean=evaluation.recon_l2(model, spec.x, spec.x),
        seed=meta["seed"],
    )
    cell = {
        "pair": meta["pair"],
        "lambda_index": meta["lam_idx"],
        "lambda": spec.lam,
        "mode": spec.mode,
        "delta": result.final_loss,
        "kl_term": result.kl_term,
        "d_norm": result.d_norm,
        "neg_target_loglik": result.neg_target_loglik,
        "iterations": result.iterations,
        "converged": result.converged,
        "diverged": result.diverged,
        "row": row.as_dict(),
    }
    return cell, result.d


def attack_campaign(
    model: VaeModel,
    pairs: list[tuple[np.ndarray, np.ndarray]],
    grid: np.ndarray,
    mode: str,
    out_dir,
    seed: int,
    model_id: str = "model",
    max_iters: int = 1000,
    tol: float = 1e-9,
    pair_indices: list[tuple[int, int]] | None = None,
    checkpoint_path: str | None = None,
) -> CampaignResult:
    """Run every (pair, lambda) attack cell, persisting one file per cell.

    The campaign is resumable: cells whose result file already exists are
    skipped.  Individual failures are recorded and do not stop the sweep.
    ``VARM_THREADS`` > 1 executes pending cells in a process pool (cells are
    independent and each writes its own files).
    """
    out_dir = Path(out_dir)
    (out_dir / "cells").mkdir(parents=True, exist_ok=True)
    grid = np.asarray(grid, dtype=np.float64)
    manifest = {
        "checkpoint": checkpoint_path,
        "model_id": model_id,
        "seed": seed,
        "mode": mode,
        "pair_indices": [list(p) for p in (pair_indices or [])],
        "n_pairs": len(pairs),
        "lambda_grid": [float(v) for v in grid],
        "max_iters": max_iters,
        "tol": tol,
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)

    pending = []
    for p, (x, x_t) in enumerate(pairs):
        for k, lam in enumerate(grid):
            cell_json, _ = _cell_paths(out_dir, p, k)
            if cell_json.exists():
                continue
            spec_kwargs = dict(x=x, x_target=x_t, lam=float(lam), mode=mode, max_iters=max_iters, tol=tol)
            meta = {"pair": p, "lam_idx": k, "seed": seed, "model_id": model_id}
            pending.append((model, spec_kwargs, meta))

    n_threads = max(1, int(os.environ.get("VARM_THREADS", "1")))
    failed = 0

    def persist(cell: dict, d: np.ndarray | None):
        cell_json, blob = _cell_paths(out_dir, cell["pair"], cell["lambda_index"])
        if d is not None:
            blob.write_bytes(np.asarray(d, dtype="<f4").tobytes())
        with open(cell_json, "w") as fh:
            json.dump(cell, fh, sort_keys=True)

    if n_threads > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=n_threads) as pool:
            for (cell, d) in pool.map(_run_cell, pending):
                persist(cell, d)
    else:
        for args in pending:
            try:
                cell, d = _run_cell(args)
            except Exception as exc:  # record the failure, keep sweeping
                meta = args[2]
                cell = {
                    "pair": meta["pair"],
                    "lambda_index": meta["lam_idx"],
                    "lambda": args[1]["lam"],
                    "mode": mode,
                    "error": f"{type(exc).__name__}: {exc}",
                }
                d = None
                failed += 1
            persist(cell, d)

    rows = []
    n_cells = len(pairs) * len(grid)
    completed = 0
    for p in range(len(pairs)):
        for k in range(len(grid)):
            cell_json, _ = _cell_paths(out_dir, p, k)
            if not cell_json.exists():
                continue
            with open(cell_json) as fh:
                cell = json.load(fh)
            if "error" in cell:
                failed += 0  # counted when it happened; skip the row
                continue
            rows.append(evaluation.MetricRow.from_dict(cell["row"]))
            completed += 1
    rows.sort(key=lambda r: (r.pair, r.lam))
    evaluation.write_metric_rows(out_dir / "campaign.csv", rows)
    return CampaignResult(
        rows=rows, n_cells=n_cells, n_completed=completed, n_failed=n_cells - completed, out_dir=out_dir
    )
