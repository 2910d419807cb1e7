"""Run configuration: one JSON file drives a whole train/eval run.

All hyperparameters live in the config file; command-line flags only override
paths. Unknown keys anywhere in the file are rejected, and every violation is
reported in a single aggregated diagnostic. A SHA-256 digest of the
canonicalized model-relevant sections (model, image, encoder, decoder, cae,
train, scoring; data/output paths excluded so runs are relocatable) is
embedded in checkpoints and evaluation reports.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cae import CaeConfig, ConvAutoencoder
from .decoder import DecoderConfig, VitAutoencoder
from .training import Checkpoint, TrainConfig, load_into
from .vit import EncoderConfig

MODEL_KINDS = ("anovit", "cae")

_SECTION_KEYS = {
    "": {"model", "image", "encoder", "decoder", "cae", "train", "scoring", "data", "out"},
    "image": {"height", "width", "channels"},
    "encoder": {"patch_size", "embed_dim", "heads", "depth", "mlp_ratio", "head_dim"},
    "decoder": {"blocks"},
    "decoder.blocks[]": {"out_channels", "kernel", "stride", "padding"},
    "cae": {"encoder_blocks", "decoder_blocks"},
    "cae.encoder_blocks[]": {"out_channels", "kernel", "stride", "padding"},
    "cae.decoder_blocks[]": {"out_channels", "kernel", "stride", "padding"},
    "train": {"epochs", "batch_size", "learning_rate", "seed", "loss_reduction",
              "beta1", "beta2", "adam_eps", "augment", "checkpoint_every", "shuffle"},
    "scoring": {"sigma", "smooth"},
    "data": {"root", "layout", "category", "normal_class", "val_fraction"},
}

_DEFAULTS = {
    "model": "anovit",
    "image": {"height": 32, "width": 32, "channels": 1},
    "encoder": {"patch_size": 8, "embed_dim": 64, "heads": 4, "depth": 4, "mlp_ratio": 4},
    "train": {"epochs": 30, "batch_size": 8, "learning_rate": 1e-4, "seed": 0,
              "loss_reduction": "sum_per_image", "beta1": 0.9, "beta2": 0.999,
              "adam_eps": 1e-8, "augment": False, "checkpoint_every": 0, "shuffle": True},
    "scoring": {"sigma": 4.0, "smooth": True},
}


class ConfigError(ValueError):
    """Aggregated configuration diagnostics; ``problems`` lists every violation."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in problems))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


@dataclass
class RunConfig:
    model: str
    image_h: int
    image_w: int
    channels: int
    encoder: EncoderConfig | None
    decoder: DecoderConfig | None
    cae: CaeConfig | None
    train: TrainConfig
    sigma: float
    smooth: bool
    data_root: str | None
    data_layout: str
    category: str | None
    normal_class: str | None
    val_fraction: float
    out_dir: str | None
    digest: str

    def data_info(self) -> dict:
        info = {"layout": self.data_layout}
        if self.category is not None:
            info["category"] = self.category
        if self.normal_class is not None:
            info["normal_class"] = self.normal_class
        return info


def _check_unknown(section: str, value: dict, problems: list[str]) -> None:
    allowed = _SECTION_KEYS[section]
    for key in value:
        if key not in allowed:
            where = section or "top level"
            problems.append(f"unknown key {key!r} in {where} (allowed: {sorted(allowed)})")


def parse_run_config(raw: dict) -> RunConfig:
    """Validate a raw config dict, apply defaults, and build typed configs."""
    problems: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["config root must be a JSON object"])
    _check_unknown("", raw, problems)

    def section(name: str) -> dict:
        value = raw.get(name, {})
        if not isinstance(value, dict):
            problems.append(f"section {name!r} must be an object")
            return {}
        _check_unknown(name, value, problems)
        return value

    model = raw.get("model", _DEFAULTS["model"])
    if model not in MODEL_KINDS:
        problems.append(f"model must be one of {MODEL_KINDS}, got {model!r}")

    image = {**_DEFAULTS["image"], **section("image")}
    enc_raw = {**_DEFAULTS["encoder"], **section("encoder")}
    train_raw = {**_DEFAULTS["train"], **section("train")}
    scoring = {**_DEFAULTS["scoring"], **section("scoring")}

    dec_raw = section("decoder")
    for i, blk in enumerate(dec_raw.get("blocks", []) or []):
        if isinstance(blk, dict):
            _check_unknown("decoder.blocks[]", blk, problems)
        else:
            problems.append(f"decoder.blocks[{i}] must be an object")
    cae_raw = section("cae")
    for field in ("encoder_blocks", "decoder_blocks"):
        for i, blk in enumerate(cae_raw.get(field, []) or []):
            if isinstance(blk, dict):
                _check_unknown(f"cae.{field}[]", blk, problems)
            else:
                problems.append(f"cae.{field}[{i}] must be an object")

    data = section("data")
    layout = data.get("layout", "mvtec")
    if layout not in ("mvtec", "oneclass"):
        problems.append(f"data.layout must be 'mvtec' or 'oneclass', got {layout!r}")

    out_dir = raw.get("out")
    if out_dir is not None and not isinstance(out_dir, str):
        problems.append("'out' must be a string path")

    encoder = decoder = cae = None
    train = None
    if not problems:
        h, w, c = image["height"], image["width"], image["channels"]
        try:
            train = TrainConfig.from_dict(train_raw)
        except (TypeError, ValueError) as exc:
            problems.append(f"train: {exc}")
        if model == "anovit":
            try:
                encoder = EncoderConfig(image_h=h, image_w=w, channels=c, **enc_raw)
                if dec_raw.get("blocks"):
                    decoder = DecoderConfig.from_dict(
                        {"blocks": dec_raw["blocks"], "target_h": h, "target_w": w,
                         "out_channels": c})
                else:
                    decoder = DecoderConfig.default_for(
                        encoder.grid_size, encoder.embed_dim, h, w, c)
                decoder.spatial_plan(encoder.grid_size, encoder.grid_size)
            except (TypeError, ValueError) as exc:
                problems.append(f"encoder/decoder: {exc}")
        else:
            try:
                if cae_raw.get("encoder_blocks") or cae_raw.get("decoder_blocks"):
                    cae = CaeConfig.from_dict(
                        {"image_h": h, "image_w": w, "channels": c, **cae_raw})
                else:
                    cae = CaeConfig.default_for(h, w, c)
            except (TypeError, ValueError) as exc:
                problems.append(f"cae: {exc}")
    if problems:
        raise ConfigError(problems)

    core = {
        "model": model,
        "image": image,
        "encoder": encoder.to_dict() if encoder else None,
        "decoder": decoder.to_dict() if decoder else None,
        "cae": cae.to_dict() if cae else None,
        "train": train.to_dict(),
        "scoring": scoring,
    }
    return RunConfig(
        model=model,
        image_h=image["height"], image_w=image["width"], channels=image["channels"],
        encoder=encoder, decoder=decoder, cae=cae, train=train,
        sigma=float(scoring["sigma"]), smooth=bool(scoring["smooth"]),
        data_root=data.get("root"), data_layout=layout,
        category=data.get("category"), normal_class=data.get("normal_class"),
        val_fraction=float(data.get("val_fraction", 0.2)),
        out_dir=out_dir, digest=config_digest(core),
    )


def load_run_config(path, model: str | None = None) -> RunConfig:
    """Parse a config file; ``model`` overrides the configured model kind."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError([f"cannot read config file {path}: {exc}"]) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config file {path} is not valid JSON: {exc}"]) from exc
    if model is not None:
        raw["model"] = model
    return parse_run_config(raw)


def build_model(cfg: RunConfig, dtype=np.float32):
    if cfg.model == "anovit":
        return VitAutoencoder(cfg.encoder, cfg.decoder, seed=cfg.train.seed, dtype=dtype)
    return ConvAutoencoder(cfg.cae, seed=cfg.train.seed, dtype=dtype)


def model_from_checkpoint(ckpt: Checkpoint):
    """Rebuild the model described by a checkpoint manifest and load its weights."""
    kind = ckpt.model_kind
    seed = int(ckpt.manifest.get("seed", 0))
    config = ckpt.manifest["config"]
    if kind == "anovit":
        model = VitAutoencoder.from_config_dict(config, seed=seed)
    elif kind == "cae":
        model = ConvAutoencoder.from_config_dict(config, seed=seed)
    else:
        raise ConfigError([f"checkpoint names unknown model kind {kind!r}"])
    load_into(model, ckpt)
    return model
