"""Command-line entry point: train / attack / eval / report.

Every command is deterministic under a fixed ``--seed`` and writes a
resolved-config snapshot (``config.json``) into its output directory.

Exit codes: 0 success, 2 configuration error, 3 missing or unusable
artifact, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import attacks, data, evaluation
from .errors import (
    ConfigError,
    IntegrityError,
    MissingArtifactError,
    NumericError,
    VersionError,
)
from .models import ModelConfig, VaeModel
from .objectives import TrainConfig, train_run

#: Default beta values for sweep-style training campaigns.
BETA_SWEEP_DEFAULT = (1.0, 2.0, 4.0, 6.0, 8.0, 10.0)

#: Default noise scales for the denoising evaluation suite.
DENOISE_SCALES_DEFAULT = (0.0, 0.25, 0.5, 1.0)

_TRAIN_DEFAULTS = {
    "objective": "vanilla",
    "beta": 1.0,
    "L": 1,
    "z_dims": [8],
    "epochs": 5,
    "batch_size": 64,
    "lr": 0.001,
    "free_bits": 0.0,
    "seed": 0,
    "likelihood": "bernoulli-logits",
    "fixed_sigma": 1.0,
    "enc_hidden": [128, 128],
    "dec_hidden": [128, 128],
    "batch_norm": False,
    "decoder_all_layers": True,
    "dataset": {"count": 512, "seed": 7},
}


def _load_train_config(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        with open(p) as fh:
            user = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError("config root must be a JSON object")
    cfg = json.loads(json.dumps(_TRAIN_DEFAULTS))  # deep copy
    for key, value in user.items():
        if key not in cfg:
            raise ConfigError(f"unknown config field {key!r}")
        if key == "dataset":
            for sub in value:
                if sub not in cfg["dataset"]:
                    raise ConfigError(f"unknown config field dataset.{sub!r}")
                cfg["dataset"][sub] = value[sub]
        else:
            cfg[key] = value
    return cfg


def _apply_overrides(cfg: dict, overrides: list[str]) -> None:
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        target = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in target or not isinstance(target[part], dict):
                raise ConfigError(f"unknown config field {key!r}")
            target = target[part]
        if parts[-1] not in target:
            raise ConfigError(f"unknown config field {key!r}")
        target[parts[-1]] = value


def _build_model_and_train_cfg(cfg: dict, n_data: int) -> tuple[ModelConfig, TrainConfig]:
    model_cfg = ModelConfig(
        data_dim=data.HEIGHT * data.WIDTH,
        L=int(cfg["L"]),
        z_dims=tuple(cfg["z_dims"]),
        beta=float(cfg["beta"]),
        likelihood=cfg["likelihood"],
        fixed_sigma=float(cfg["fixed_sigma"]),
        enc_hidden=tuple(cfg["enc_hidden"]),
        dec_hidden=tuple(cfg["dec_hidden"]),
        free_bits=float(cfg["free_bits"]),
        dataset_size=n_data,
        decoder_all_layers=bool(cfg["decoder_all_layers"]),
        batch_norm=bool(cfg["batch_norm"]),
    )
    train_cfg = TrainConfig(
        objective=cfg["objective"],
        epochs=int(cfg["epochs"]),
        batch_size=int(cfg["batch_size"]),
        lr=float(cfg["lr"]),
        seed=int(cfg["seed"]),
    )
    return model_cfg, train_cfg


def _write_trace_csv(path: Path, result) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "total", "reconstruction", "kl_sum", "tc_estimate"])
        records = [(0, result.initial)] + [(i + 1, r) for i, r in enumerate(result.trace)]
        for epoch, rep in records:
            writer.writerow(
                [epoch, repr(rep.total), repr(rep.reconstruction), repr(sum(rep.kl_terms)), repr(rep.tc_estimate)]
            )


def _train_single(cfg: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
    dataset = data.gen_sprites(int(cfg["dataset"]["count"]), int(cfg["dataset"]["seed"]))
    model_cfg, train_cfg = _build_model_and_train_cfg(cfg, len(dataset))
    model = VaeModel(model_cfg, seed=train_cfg.seed)
    result = train_run(model, dataset.images.astype(np.float64), train_cfg)
    data.save_checkpoint(
        model,
        out / "checkpoint",
        training={
            "seed": train_cfg.seed,
            "epoch": result.epochs_run,
            "objective": train_cfg.objective,
            "diverged": result.diverged,
            "dataset": cfg["dataset"],
            "run_config": cfg,
        },
    )
    _write_trace_csv(out / "trace.csv", result)
    status = "diverged (restored last-good parameters)" if result.diverged else "ok"
    print(f"trained {train_cfg.objective} beta={cfg['beta']} for {result.epochs_run} epochs: {status}")


def cmd_train(args) -> int:
    cfg = _load_train_config(args.config)
    _apply_overrides(cfg, args.override)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = Path(args.out)
    if args.beta_sweep is None:
        _train_single(cfg, out)
    else:
        betas = [float(b) for b in (args.beta_sweep or BETA_SWEEP_DEFAULT)]
        for beta in betas:
            sub_cfg = json.loads(json.dumps(cfg))
            sub_cfg["beta"] = beta
            _train_single(sub_cfg, out / f"beta_{beta:g}")
    return 0


def _dataset_from_manifest(manifest: dict) -> data.SpriteDataset:
    ds = manifest.get("training", {}).get("dataset")
    if not ds:
        raise ConfigError("checkpoint manifest does not record its training dataset")
    return data.gen_sprites(int(ds["count"]), int(ds["seed"]))


def _subsample_grid(n_lambdas: int) -> np.ndarray:
    full = attacks.lambda_grid()
    if n_lambdas >= len(full):
        return full
    idx = np.unique(np.round(np.linspace(0, len(full) - 1, n_lambdas)).astype(int))
    return full[idx]


def cmd_attack(args) -> int:
    ckpt = Path(args.ckpt)
    model, manifest = data.load_checkpoint(ckpt)
    dataset = _dataset_from_manifest(manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(args.seed))
    if 2 * args.pairs > len(dataset):
        raise ConfigError(f"{args.pairs} pairs need {2 * args.pairs} images, dataset has {len(dataset)}")
    chosen = rng.choice(len(dataset), size=2 * args.pairs, replace=False)
    pair_indices = [(int(chosen[2 * i]), int(chosen[2 * i + 1])) for i in range(args.pairs)]
    pairs = [
        (dataset.images[a].astype(np.float64), dataset.images[b].astype(np.float64))
        for a, b in pair_indices
    ]
    grid = _subsample_grid(args.lambdas)
    snapshot = {
        "command": "attack",
        "ckpt": str(ckpt),
        "mode": args.mode,
        "pairs": args.pairs,
        "lambdas": args.lambdas,
        "seed": args.seed,
        "max_iters": args.max_iters,
    }
    with open(out / "config.json", "w") as fh:
        json.dump(snapshot, fh, indent=2, sort_keys=True)
    result = attacks.attack_campaign(
        model,
        pairs,
        grid,
        args.mode,
        out,
        seed=args.seed,
        model_id=ckpt.name or "model",
        max_iters=args.max_iters,
        pair_indices=pair_indices,
        checkpoint_path=str(ckpt),
    )
    print(
        f"campaign: {result.n_completed}/{result.n_cells} cells ok, "
        f"{result.n_failed} failed, results in {out}"
    )
    return 0


def cmd_eval(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = {
        "command": "eval",
        "suite": args.suite,
        "ckpt": [str(c) for c in args.ckpt],
        "seed": args.seed,
        "scales": list(args.scales) if args.scales else list(DENOISE_SCALES_DEFAULT),
        "count": args.count,
    }
    with open(out / "config.json", "w") as fh:
        json.dump(snapshot, fh, indent=2, sort_keys=True)

    if args.suite == "weights":
        if len(args.ckpt) != 2:
            raise ConfigError("the weights suite needs exactly two --ckpt flags")
        model_a, _ = data.load_checkpoint(args.ckpt[0])
        model_b, _ = data.load_checkpoint(args.ckpt[1])
        report = evaluation.weight_l2_report(model_a, model_b)
        with open(out / "weights.json", "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
        print(
            "relative L2 change: encoder "
            f"{report['encoder']['relative_change_pct']:+.2f}%, decoder "
            f"{report['decoder']['relative_change_pct']:+.2f}%"
        )
        return 0

    if len(args.ckpt) != 1:
        raise ConfigError(f"the {args.suite} suite needs exactly one --ckpt flag")
    model, manifest = data.load_checkpoint(args.ckpt[0])
    dataset = _dataset_from_manifest(manifest)
    images = dataset.images.astype(np.float64)
    if args.count and args.count < len(images):
        images = images[: args.count]

    if args.suite == "denoise":
        scales = args.scales if args.scales else DENOISE_SCALES_DEFAULT
        result = evaluation.denoise_density(model, images, scales, seed=args.seed)
        evaluation.write_histograms_json(out / "denoise.json", result)
        with open(out / "denoise_means.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["scale", "mean_log_likelihood"])
            for s in result["scales"]:
                writer.writerow([s, repr(result["means"][f"{s:g}"])])
        print("denoise means:", {k: round(v, 3) for k, v in result["means"].items()})
    elif args.suite == "elbo":
        report = evaluation.elbo_unpenalized(model, images, seed=args.seed)
        with open(out / "elbo.json", "w") as fh:
            json.dump(report.as_dict(), fh, indent=2, sort_keys=True)
        print(f"unpenalized ELBO: {report.total:.4f}")
    return 0


def _attack_grid_png(out: Path, model: VaeModel, pair_idx: int, lam_idx: int, x, x_t, d) -> None:
    from .pngio import rescale_full_range, to_uint8, write_gray_png

    h, w = data.HEIGHT, data.WIDTH
    x_star = np.clip(x + d, -1.0, 1.0)
    blank = np.zeros(h * w)
    row_inputs = [x, x_star, rescale_full_range(d), x_t]
    row_recons = [model.reconstruct(x), model.reconstruct(x_star), blank, model.reconstruct(x_t)]
    tiles = np.zeros((2 * h, 4 * w), dtype=np.uint8)
    for c, img in enumerate(row_inputs):
        tiles[0:h, c * w : (c + 1) * w] = to_uint8(np.asarray(img).reshape(h, w))
    for c, img in enumerate(row_recons):
        tiles[h : 2 * h, c * w : (c + 1) * w] = to_uint8(np.asarray(img).reshape(h, w))
    write_gray_png(out / f"grid_{pair_idx:03d}_{lam_idx:02d}.png", tiles)


def cmd_report(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    all_rows: list[evaluation.MetricRow] = []
    snapshot = {"command": "report", "campaigns": [str(c) for c in args.campaign]}
    with open(out / "config.json", "w") as fh:
        json.dump(snapshot, fh, indent=2, sort_keys=True)

    for camp_dir in args.campaign:
        camp = Path(camp_dir)
        manifest_path = camp / "manifest.json"
        csv_path = camp / "campaign.csv"
        if not manifest_path.exists() or not csv_path.exists():
            raise MissingArtifactError(f"{camp} is not a completed campaign directory")
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        all_rows.extend(evaluation.read_metric_rows(csv_path))
        if manifest.get("checkpoint"):
            model, ckpt_manifest = data.load_checkpoint(manifest["checkpoint"])
            dataset = _dataset_from_manifest(ckpt_manifest)
            for p, (ia, ib) in enumerate(manifest.get("pair_indices", [])):
                x = dataset.images[ia].astype(np.float64)
                x_t = dataset.images[ib].astype(np.float64)
                for k in range(len(manifest["lambda_grid"])):
                    blob = camp / "cells" / f"d_p{p:03d}_l{k:02d}.bin"
                    if not blob.exists():
                        continue
                    d = np.frombuffer(blob.read_bytes(), dtype="<f4").astype(np.float64)
                    _attack_grid_png(out, model, p, k, x, x_t, d)

    if not all_rows:
        raise MissingArtifactError("no campaign rows found to report on")
    summaries = evaluation.aggregate_campaign(all_rows)
    evaluation.write_summary_csv(out / "ci_bands.csv", summaries)
    evaluation.write_summary_csv(out / "summary.csv", summaries)
    _plot_delta_vs_beta(out / "delta_vs_beta.png", summaries)
    print(f"report written to {out} ({len(summaries)} (beta, L) cells)")
    return 0


def _plot_delta_vs_beta(path: Path, summaries: list[dict]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    by_l: dict[int, list[dict]] = {}
    for s in summaries:
        by_l.setdefault(s["L"], []).append(s)
    for L, group in sorted(by_l.items()):
        group = sorted(group, key=lambda s: s["beta"])
        betas = [s["beta"] for s in group]
        med = [s["delta_median"] for s in group]
        lo = [s["delta_p2_5"] for s in group]
        hi = [s["delta_p97_5"] for s in group]
        ax.plot(betas, med, marker="o", label=f"L={L}")
        ax.fill_between(betas, lo, hi, alpha=0.2)
    ax.set_xlabel("beta")
    ax.set_ylabel("attack loss (median, 95% band)")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robustvae", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a JSON config")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p_train.add_argument(
        "--beta-sweep",
        nargs="*",
        default=None,
        help="train one checkpoint per beta (no values: the default sweep set)",
    )
    p_train.set_defaults(func=cmd_train)

    p_attack = sub.add_parser("attack", help="run an attack campaign on a checkpoint")
    p_attack.add_argument("--ckpt", required=True)
    p_attack.add_argument("--mode", choices=["latent", "output", "latent-top", "latent-bottom"], default="latent")
    p_attack.add_argument("--pairs", type=int, default=10)
    p_attack.add_argument("--lambdas", type=int, default=attacks.LAMBDA_GRID_SIZE)
    p_attack.add_argument("--out", required=True)
    p_attack.add_argument("--seed", type=int, default=0)
    p_attack.add_argument("--max-iters", type=int, default=1000)
    p_attack.set_defaults(func=cmd_attack)

    p_eval = sub.add_parser("eval", help="run an evaluation suite on a checkpoint")
    p_eval.add_argument("--ckpt", action="append", required=True)
    p_eval.add_argument("--suite", choices=["denoise", "elbo", "weights"], required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--scales", type=float, nargs="*", default=None)
    p_eval.add_argument("--count", type=int, default=512)
    p_eval.set_defaults(func=cmd_eval)

    p_report = sub.add_parser("report", help="render plots and tables from campaigns")
    p_report.add_argument("--campaign", action="append", required=True)
    p_report.add_argument("--out", required=True)
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (MissingArtifactError, IntegrityError, VersionError) as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
