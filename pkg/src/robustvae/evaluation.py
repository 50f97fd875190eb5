"""Robustness and quality metrics, plus campaign CSV persistence.

All metrics are pure functions of a frozen model, their inputs and a seed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .distributions import log_likelihood
from .models import VaeModel
from .objectives import ObjectiveReport, eval_objective

CSV_HEADER = [
    "model_id",
    "beta",
    "L",
    "z_dims",
    "lambda",
    "pair",
    "delta",
    "neg_loglik",
    "l2_adv",
    "l2_clean",
    "seed",
]


@dataclass
class MetricRow:
    """One campaign cell's metrics (one attacked pair at one lambda)."""

    model_id: str
    beta: float
    L: int
    z_dims: tuple[int, ...]
    lam: float
    pair: int
    delta: float
    neg_loglik: float
    l2_adv: float
    l2_clean: float
    seed: int

    def __post_init__(self):
        self.z_dims = tuple(int(z) for z in self.z_dims)
        for name in ("beta", "lam", "delta", "neg_loglik", "l2_adv", "l2_clean"):
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise ValueError(f"MetricRow field {name} must be finite, got {v}")
            setattr(self, name, v)

    def as_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "beta": self.beta,
            "L": self.L,
            "z_dims": list(self.z_dims),
            "lam": self.lam,
            "pair": self.pair,
            "delta": self.delta,
            "neg_loglik": self.neg_loglik,
            "l2_adv": self.l2_adv,
            "l2_clean": self.l2_clean,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricRow":
        d = dict(d)
        d["z_dims"] = tuple(d["z_dims"])
        return cls(**d)


# ----------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------

def neg_target_loglik(model: VaeModel, x_target, x_star) -> float:
    """-log p(x_target | z*) where z* is the mean-chain encoding of x_star.

    Higher values mean the attack was less successful.
    """
    x_target = np.asarray(x_target, dtype=np.float64)
    x_star = np.asarray(x_star, dtype=np.float64)
    if x_target.shape != x_star.shape:
        raise ValueError("x_target and x_star must have the same shape")
    chain = model.infer_chain(x_star, eps=None)
    lp = model.decode_likelihood(chain.samples)
    return -float(log_likelihood(lp, x_target))


def recon_l2(model: VaeModel, x_a, x_b) -> float:
    """||reconstruct(x_a) - x_b||_2."""
    recon = model.reconstruct(np.asarray(x_a, dtype=np.float64))
    return float(np.linalg.norm(recon - np.asarray(x_b, dtype=np.float64)))


def denoise_density(
    model: VaeModel,
    images: np.ndarray,
    noise_scales,
    seed: int,
    bins: int = 40,
) -> dict:
    """Sampled log p(x | z), z ~ q(z | x + eps), per noise scale.

    For each scale s, fresh Gaussian input noise eps ~ N(0, s^2 I) is drawn
    per datapoint, the chain is sampled once, and the likelihood of the
    *clean* x under the decoded parameters is recorded.  Returns raw values,
    per-scale means and histogram data.
    """
    scales = [float(s) for s in noise_scales]
    if any(s < 0 for s in scales):
        raise ValueError("noise scales must be >= 0")
    rng = np.random.Generator(np.random.PCG64(seed))
    images = np.asarray(images, dtype=np.float64)
    out = {"scales": scales, "values": {}, "means": {}, "histograms": {}}
    for s in scales:
        noisy = images + s * rng.standard_normal(images.shape)
        eps = [rng.standard_normal((len(images), zd)) for zd in model.config.z_dims]
        chain = model.infer_chain(noisy, eps=eps)
        lp = model.decode_likelihood(chain.samples)
        values = np.asarray(log_likelihood(lp, images), dtype=np.float64)
        counts, edges = np.histogram(values, bins=bins)
        key = f"{s:g}"
        out["values"][key] = values.tolist()
        out["means"][key] = float(values.mean())
        out["histograms"][key] = {"counts": counts.tolist(), "bin_edges": edges.tolist()}
    return out


def elbo_unpenalized(model: VaeModel, images: np.ndarray, batch_size: int = 256, seed: int = 0) -> ObjectiveReport:
    """The model's objective with beta forced to 1, averaged over a dataset."""
    objective = "vanilla" if model.L == 1 else "seatbelt"
    batch_size = min(batch_size, len(images))
    return eval_objective(model, images, objective, batch_size=batch_size, seed=seed, beta=1.0)


def weight_l2_report(model_a: VaeModel, model_b: VaeModel) -> dict:
    """Relative L2 change (percent) of encoder-side and decoder-side weights."""

    def group_norm(model: VaeModel, names: list[str]) -> float:
        trainable = set(model.store.trainable_names())
        vecs = [model.store[n].ravel() for n in names if n in trainable]
        return float(np.linalg.norm(np.concatenate(vecs)))

    report = {}
    for side, names_a, names_b in (
        ("encoder", model_a.encoder_side_names(), model_b.encoder_side_names()),
        ("decoder", model_a.decoder_side_names(), model_b.decoder_side_names()),
    ):
        norm_a = group_norm(model_a, names_a)
        norm_b = group_norm(model_b, names_b)
        report[side] = {
            "norm_a": norm_a,
            "norm_b": norm_b,
            "relative_change_pct": 100.0 * (norm_b - norm_a) / norm_a,
        }
    return report


def aggregate_campaign(rows: list[MetricRow]) -> list[dict]:
    """Median and 95% percentile band per (beta, L) cell, for delta and
    the negative target likelihood."""
    groups: dict[tuple[float, int], list[MetricRow]] = {}
    for row in rows:
        groups.setdefault((row.beta, row.L), []).append(row)
    summaries = []
    for (beta, L) in sorted(groups):
        members = groups[(beta, L)]
        deltas = np.array([r.delta for r in members])
        neglls = np.array([r.neg_loglik for r in members])
        summaries.append(
            {
                "beta": beta,
                "L": L,
                "count": len(members),
                "delta_median": float(np.median(deltas)),
                "delta_p2_5": float(np.percentile(deltas, 2.5)),
                "delta_p97_5": float(np.percentile(deltas, 97.5)),
                "negll_median": float(np.median(neglls)),
                "negll_p2_5": float(np.percentile(neglls, 2.5)),
                "negll_p97_5": float(np.percentile(neglls, 97.5)),
            }
        )
    return summaries


# ----------------------------------------------------------------------
# CSV persistence
# ----------------------------------------------------------------------

def _fmt_z_dims(z_dims: tuple[int, ...]) -> str:
    return "x".join(str(z) for z in z_dims)


def _parse_z_dims(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split("x"))


def write_metric_rows(path, rows: list[MetricRow]) -> None:
    """Write rows with the fixed header; floats use round-trip repr."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in rows:
            writer.writerow(
                [
                    r.model_id,
                    repr(r.beta),
                    r.L,
                    _fmt_z_dims(r.z_dims),
                    repr(r.lam),
                    r.pair,
                    repr(r.delta),
                    repr(r.neg_loglik),
                    repr(r.l2_adv),
                    repr(r.l2_clean),
                    r.seed,
                ]
            )


def read_metric_rows(path) -> list[MetricRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {header}")
        for rec in reader:
            rows.append(
                MetricRow(
                    model_id=rec[0],
                    beta=float(rec[1]),
                    L=int(rec[2]),
                    z_dims=_parse_z_dims(rec[3]),
                    lam=float(rec[4]),
                    pair=int(rec[5]),
                    delta=float(rec[6]),
                    neg_loglik=float(rec[7]),
                    l2_adv=float(rec[8]),
                    l2_clean=float(rec[9]),
                    seed=int(rec[10]),
                )
            )
    return rows


def write_summary_csv(path, summaries: list[dict]) -> None:
    """One row per (beta, L) cell with medians and 95% CI bounds."""
    fields = [
        "beta",
        "L",
        "count",
        "delta_median",
        "delta_p2_5",
        "delta_p97_5",
        "negll_median",
        "negll_p2_5",
        "negll_p97_5",
    ]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for s in summaries:
            writer.writerow({k: s[k] for k in fields})


def write_histograms_json(path, data: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    slim = {
        "scales": data["scales"],
        "means": data["means"],
        "histograms": data["histograms"],
    }
    with open(path, "w") as fh:
        json.dump(slim, fh, indent=2, sort_keys=True)
