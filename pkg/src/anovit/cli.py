"""Command-line interface wiring data -> model -> training -> scoring -> evaluation.

Subcommands::

    anovit train     --config cfg.json [--data DIR] [--out DIR] [--resume CKPT]
    anovit eval      --ckpt DIR --data DIR --task det|loc [--report PATH] ...
    anovit score     --ckpt DIR --image PATH --out-map PATH [--sigma S]
    anovit synth     --spec spec.json --out DIR
    anovit gradcheck --config cfg.json [--tol T] [--mode 32|64] [--samples N]

Exit codes: 0 success, 1 usage/config error, 2 runtime error,
3 gradient-check failure. Commands never mutate their input dataset
directories and overwrite their outputs deterministically.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff, config as cfgmod, data, evaluation, scoring, training
from .config import ConfigError


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; the CLI contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="anovit",
                     description="Transformer and convolutional autoencoders for "
                                 "unsupervised image anomaly detection")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a JSON config")
    p_train.add_argument("--config", required=True, help="run config JSON")
    p_train.add_argument("--model", choices=("anovit", "cae"),
                         help="model kind (overrides config)")
    p_train.add_argument("--data", help="dataset root (overrides config)")
    p_train.add_argument("--out", help="output directory (overrides config)")
    p_train.add_argument("--resume", help="checkpoint directory to resume from")
    p_train.add_argument("--threads", type=int, default=1,
                         help="worker threads; 1 forces the deterministic path")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p_eval.add_argument("--ckpt", required=True, help="checkpoint directory")
    p_eval.add_argument("--data", required=True, help="dataset root")
    p_eval.add_argument("--task", required=True, choices=("det", "loc"))
    p_eval.add_argument("--report", help="where to write report.json")
    p_eval.add_argument("--category", help="dataset category (defaults to checkpoint)")
    p_eval.add_argument("--layout", choices=("mvtec", "oneclass"),
                        help="dataset layout (defaults to checkpoint)")
    p_eval.add_argument("--normal-class", help="normal class for oneclass layout")
    p_eval.add_argument("--sigma", type=float, help="smoothing sigma (default: checkpoint)")
    p_eval.add_argument("--no-smooth", action="store_true", help="disable Gaussian smoothing")
    p_eval.add_argument("--pixel-budget", type=int,
                        help="subsample pooled pixels above this budget (seeded)")
    p_eval.add_argument("--baseline", help="baseline report.json for the improvement column")
    p_eval.add_argument("--threads", type=int, default=1)

    p_score = sub.add_parser("score", help="score a single image")
    p_score.add_argument("--ckpt", required=True)
    p_score.add_argument("--image", required=True)
    p_score.add_argument("--out-map", required=True,
                         help="output base path; writes .png, .f32 and .json")
    p_score.add_argument("--sigma", type=float, help="smoothing sigma (default: checkpoint)")
    p_score.add_argument("--no-smooth", action="store_true")

    p_synth = sub.add_parser("synth", help="generate a synthetic defect dataset")
    p_synth.add_argument("--spec", required=True, help="synth spec JSON")
    p_synth.add_argument("--out", required=True, help="output dataset root")

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p_grad.add_argument("--config", required=True)
    p_grad.add_argument("--model", choices=("anovit", "cae"),
                        help="model kind (overrides config)")
    p_grad.add_argument("--tol", type=float, help="override tolerance")
    p_grad.add_argument("--mode", choices=("32", "64"), default="32",
                        help="parameter precision (default tol 1e-3 / 1e-5)")
    p_grad.add_argument("--samples", type=int, default=4,
                        help="finite-difference samples per parameter")
    p_grad.add_argument("--batch", type=int, default=2,
                        help="random images in the probe batch")
    return parser


def _load_split(root: str, layout: str, run_cfg, category: str | None,
                normal_class: str | None):
    size = (run_cfg.image_h, run_cfg.image_w)
    if layout == "mvtec":
        if not category:
            raise DataUsageError("mvtec layout needs a category (config data.category or --category)")
        return data.load_mvtec_layout(root, category, image_size=size,
                                      channels=run_cfg.channels)
    if not normal_class:
        raise DataUsageError("oneclass layout needs data.normal_class or --normal-class")
    return data.load_oneclass_split(root, normal_class, image_size=size,
                                    channels=run_cfg.channels,
                                    val_fraction=run_cfg.val_fraction,
                                    seed=run_cfg.train.seed)


class DataUsageError(ValueError):
    pass


def _run_config_from_manifest(manifest: dict) -> cfgmod.RunConfig:
    """Reconstruct enough of the training run config from a checkpoint."""
    raw = {
        "model": manifest["model"],
        "train": manifest.get("train", {}),
        "scoring": manifest.get("scoring", {}),
        "data": manifest.get("data", {}),
    }
    cfg = manifest["config"]
    if manifest["model"] == "anovit":
        enc = dict(cfg["encoder"])
        raw["image"] = {"height": enc.pop("image_h"), "width": enc.pop("image_w"),
                        "channels": enc.pop("channels")}
        raw["encoder"] = enc
        raw["decoder"] = {"blocks": cfg["decoder"]["blocks"]}
    else:
        cae = dict(cfg["cae"])
        raw["image"] = {"height": cae.pop("image_h"), "width": cae.pop("image_w"),
                        "channels": cae.pop("channels")}
        raw["cae"] = {"encoder_blocks": cae["encoder_blocks"],
                      "decoder_blocks": cae["decoder_blocks"]}
    return cfgmod.parse_run_config(raw)


def _cmd_train(args) -> int:
    run_cfg = cfgmod.load_run_config(args.config, model=args.model)
    root = args.data or run_cfg.data_root
    out = args.out or run_cfg.out_dir
    if not root:
        raise DataUsageError("no dataset root: set data.root in the config or pass --data")
    if not out:
        raise DataUsageError("no output directory: set 'out' in the config or pass --out")
    split = _load_split(root, run_cfg.data_layout, run_cfg,
                        run_cfg.category, run_cfg.normal_class)
    model = cfgmod.build_model(run_cfg)
    resume = training.load_checkpoint(args.resume) if args.resume else None
    out_path = Path(out)
    ckpt = training.fit(split.train, model, run_cfg.train,
                        out_dir=out_path / "checkpoint", resume=resume,
                        config_digest=run_cfg.digest, data_info=run_cfg.data_info(),
                        scoring_info={"sigma": run_cfg.sigma, "smooth": run_cfg.smooth})
    with open(out_path / "loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for i, value in enumerate(ckpt.manifest["loss_history"]):
            writer.writerow([i, f"{value:.8f}"])
    print(f"checkpoint: {out_path / 'checkpoint'}")
    print(f"loss curve: {out_path / 'loss.csv'}")
    if ckpt.manifest["loss_history"]:
        print(f"final epoch loss: {ckpt.manifest['loss_history'][-1]:.6f}")
    return 0


def _cmd_eval(args) -> int:
    ckpt = training.load_checkpoint(args.ckpt)
    model = cfgmod.model_from_checkpoint(ckpt)
    run_cfg = _run_config_from_manifest(ckpt.manifest)
    stored_data = ckpt.manifest.get("data", {})
    layout = args.layout or stored_data.get("layout", "mvtec")
    category = args.category or stored_data.get("category")
    normal_class = args.normal_class or stored_data.get("normal_class")
    split = _load_split(args.data, layout, run_cfg, category, normal_class)
    sigma = args.sigma if args.sigma is not None else run_cfg.sigma
    smooth = run_cfg.smooth and not args.no_smooth
    report = evaluation.evaluate(
        model, split, args.task, dataset=layout, sigma=sigma, smooth=smooth,
        pixel_budget=args.pixel_budget, subsample_seed=run_cfg.train.seed,
        config_digest=ckpt.manifest.get("config_digest", ""),
    )
    baselines = None
    if args.baseline:
        baselines = [evaluation.EvalReport.from_dict(
            json.loads(Path(args.baseline).read_text()))]
    print(evaluation.format_report_table([report], baselines))
    if args.report:
        evaluation.write_report(report, args.report)
        print(f"report: {args.report}")
    return 0


def _cmd_score(args) -> int:
    ckpt = training.load_checkpoint(args.ckpt)
    model = cfgmod.model_from_checkpoint(ckpt)
    run_cfg = _run_config_from_manifest(ckpt.manifest)
    h, w, c = model.image_shape
    image = data.load_image(args.image, h, w, c)
    recon = model.reconstruct(image[None])[0]
    m = scoring.score_map(image, recon)
    sigma = args.sigma if args.sigma is not None else run_cfg.sigma
    smooth = run_cfg.smooth and not args.no_smooth
    if smooth:
        m = scoring.gaussian_smooth(m, sigma)
    sidecar = scoring.export_score_map(m, args.out_map,
                                       sigma=sigma if smooth else None, smoothed=smooth)
    print(f"{sidecar['anomaly_score']:.8f}")
    return 0


def _cmd_synth(args) -> int:
    try:
        raw = json.loads(Path(args.spec).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError([f"cannot read synth spec {args.spec}: {exc}"]) from exc
    try:
        spec = data.SynthSpec.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError([f"synth spec: {exc}"]) from exc
    split = data.generate_synth(spec, args.out)
    print(f"dataset: {Path(args.out) / spec.category}")
    print(f"train: {split.train.shape[0]}  test: {split.test.shape[0]} "
          f"({int(split.test_labels.sum())} anomalous)")
    return 0


def _cmd_gradcheck(args) -> int:
    run_cfg = cfgmod.load_run_config(args.config, model=args.model)
    dtype = np.float32 if args.mode == "32" else np.float64
    tol = args.tol if args.tol is not None else (1e-3 if args.mode == "32" else 1e-5)
    model = cfgmod.build_model(run_cfg, dtype=dtype)
    rng = np.random.default_rng(run_cfg.train.seed)
    batch = rng.uniform(0.0, 1.0, (args.batch, *model.image_shape)).astype(dtype)
    report = autodiff.grad_check(
        lambda: training.reconstruction_loss(batch, model, run_cfg.train.loss_reduction),
        model.params, tol=tol, max_samples_per_param=args.samples,
        seed=run_cfg.train.seed,
    )
    print(report.format())
    return 0 if report.passed else 3


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "train": _cmd_train,
        "eval": _cmd_eval,
        "score": _cmd_score,
        "synth": _cmd_synth,
        "gradcheck": _cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, DataUsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (data.DatasetError, training.CheckpointError, training.TrainingError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
