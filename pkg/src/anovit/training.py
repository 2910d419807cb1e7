"""Reconstruction objective, Adam optimizer, epoch loop, checkpoint format.

The loss is the mean over a batch of per-image sums of squared pixel
differences between input and reconstruction (a mean-per-element reduction is
available so score magnitudes do not scale with resolution).

Checkpoints are a directory: ``manifest.json`` (model kind, config, parameter
table, seed, epoch/step counters, loss history, config digest) plus one raw
little-endian float32 blob per parameter under ``params/``. Save -> load ->
save is byte-identical. Format version 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor

CHECKPOINT_FORMAT_VERSION = 1

REDUCTIONS = ("sum_per_image", "mean_per_element")


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or inconsistent state)."""


class CheckpointError(ValueError):
    """Checkpoint directory is malformed or does not match the model."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-4
    seed: int = 0
    loss_reduction: str = "sum_per_image"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    augment: bool = False
    checkpoint_every: int = 0  # epochs between periodic saves; 0 = final only
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.loss_reduction not in REDUCTIONS:
            raise ValueError(
                f"loss_reduction must be one of {REDUCTIONS}, got {self.loss_reduction!r}"
            )

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs, "batch_size": self.batch_size,
            "learning_rate": self.learning_rate, "seed": self.seed,
            "loss_reduction": self.loss_reduction, "beta1": self.beta1,
            "beta2": self.beta2, "adam_eps": self.adam_eps,
            "augment": self.augment, "checkpoint_every": self.checkpoint_every,
            "shuffle": self.shuffle,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def reconstruction_loss(batch, model, reduction: str = "sum_per_image") -> Tensor:
    """Mean over the batch of squared reconstruction errors.

    ``sum_per_image`` sums squared differences over all pixels of an image
    before averaging over the batch; ``mean_per_element`` averages over every
    element instead.
    """
    if reduction not in REDUCTIONS:
        raise ValueError(f"unknown reduction {reduction!r}")
    arr = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    if arr.ndim != 4 or arr.shape[0] < 1:
        raise ValueError(f"batch must be nonempty (m, H, W, C), got shape {arr.shape}")
    recon = model.forward(batch)
    diff = ad.sub(recon, ad.as_tensor(batch))
    sq = ad.square(diff)
    if reduction == "sum_per_image":
        per_image = ad.tensor_sum(sq, axis=(1, 2, 3))
        return ad.tensor_mean(per_image)
    return ad.tensor_mean(sq)


class Adam:
    """Adam with bias correction; state is per-parameter first/second moments."""

    def __init__(self, params: ParameterStore, lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in params.trainable()}
        self.v = {p.name: np.zeros_like(p.data) for p in params.trainable()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p in self.params.trainable():
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _diagnose_non_finite(model) -> str:
    for p in model.params:
        if not np.all(np.isfinite(p.data)):
            return f"parameter {p.name!r} contains non-finite values"
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            return f"gradient of parameter {p.name!r} contains non-finite values"
    return "no non-finite parameter found; failure is in an activation"


def train_step(batch, model, optimizer: Adam, reduction: str = "sum_per_image") -> float:
    """One forward/backward/Adam update; returns the pre-update loss."""
    model.params.zero_grad()
    loss = reconstruction_loss(batch, model, reduction)
    value = float(loss.data)
    if not np.isfinite(value):
        detail = _diagnose_non_finite(model)
        try:  # rerun with per-op checks to name the producing op
            with ad.finite_checks():
                reconstruction_loss(batch, model, reduction)
        except FloatingPointError as exc:
            detail = f"{detail}; {exc}"
        raise TrainingError(f"non-finite loss ({value}): {detail}")
    loss.backward()
    optimizer.step()
    return value


@dataclass
class Checkpoint:
    """In-memory checkpoint: JSON-compatible manifest + float32 blobs."""

    manifest: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def model_kind(self) -> str:
        return self.manifest["model"]


def make_checkpoint(model, *, seed: int, epoch: int, step: int,
                    loss_history: list[float], config_digest: str = "",
                    train_config: TrainConfig | None = None,
                    data_info: dict | None = None,
                    scoring_info: dict | None = None) -> Checkpoint:
    arrays = {}
    table = []
    for p in model.params:
        arr = np.ascontiguousarray(p.data.astype(np.float32))
        arrays[p.name] = arr
        table.append({"name": p.name, "shape": list(arr.shape), "dtype": "float32"})
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model": model.kind,
        "config": model.config_dict(),
        "seed": seed,
        "epoch": epoch,
        "step": step,
        "loss_history": [float(x) for x in loss_history],
        "config_digest": config_digest,
        "params": table,
    }
    if train_config is not None:
        manifest["train"] = train_config.to_dict()
    if data_info is not None:
        manifest["data"] = data_info
    if scoring_info is not None:
        manifest["scoring"] = scoring_info
    return Checkpoint(manifest, arrays)


def save_checkpoint(ckpt: Checkpoint, directory) -> Path:
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    text = json.dumps(ckpt.manifest, indent=2, sort_keys=True) + "\n"
    try:
        (directory / "manifest.json").write_text(text)
        for entry in ckpt.manifest["params"]:
            name = entry["name"]
            blob = ckpt.arrays[name].astype("<f4").tobytes()
            (directory / "params" / f"{name}.bin").write_bytes(blob)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint under {directory}: {exc}") from exc
    return directory


def load_checkpoint(directory) -> Checkpoint:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise CheckpointError(f"no manifest.json in {directory}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read {manifest_path}: {exc}") from exc
    version = manifest.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format_version {version!r} "
            f"(this build reads version {CHECKPOINT_FORMAT_VERSION})"
        )
    arrays = {}
    for entry in manifest.get("params", []):
        name = entry["name"]
        shape = tuple(entry["shape"])
        if entry.get("dtype") != "float32":
            raise CheckpointError(f"parameter {name!r}: unsupported dtype {entry.get('dtype')!r}")
        blob_path = directory / "params" / f"{name}.bin"
        if not blob_path.is_file():
            raise CheckpointError(f"missing blob for parameter {name!r}: {blob_path}")
        blob = blob_path.read_bytes()
        expected = int(np.prod(shape, dtype=np.int64)) * 4
        if len(blob) != expected:
            raise CheckpointError(
                f"blob length mismatch for {name!r}: expected {expected} bytes, got {len(blob)}"
            )
        arrays[name] = np.frombuffer(blob, dtype="<f4").reshape(shape).copy()
    return Checkpoint(manifest, arrays)


def load_into(model, ckpt: Checkpoint) -> None:
    """Restore parameter values from a checkpoint into a built model."""
    if ckpt.model_kind != model.kind:
        raise CheckpointError(
            f"checkpoint holds a {ckpt.model_kind!r} model, not {model.kind!r}"
        )
    model_names = set(model.params.names())
    ckpt_names = set(ckpt.arrays)
    missing = sorted(model_names - ckpt_names)
    unknown = sorted(ckpt_names - model_names)
    if missing or unknown:
        raise CheckpointError(
            f"parameter mismatch: manifest missing {missing or 'none'}, "
            f"unexpected {unknown or 'none'}"
        )
    try:
        model.params.load_state_dict(ckpt.arrays)
    except (KeyError, ad.ShapeError) as exc:
        raise CheckpointError(str(exc)) from exc


def fit(
    train_images: np.ndarray,
    model,
    config: TrainConfig,
    out_dir=None,
    resume: Checkpoint | None = None,
    config_digest: str = "",
    data_info: dict | None = None,
    scoring_info: dict | None = None,
    augment_fn=None,
) -> Checkpoint:
    """Epoch loop over shuffled normal-only images; returns the final checkpoint.

    ``config.epochs`` is the total epoch target: resuming from a checkpoint at
    epoch ``e`` runs the remaining ``epochs - e`` epochs and continues the step
    counter exactly (optimizer moments restart; they are not checkpointed).
    ``augment_fn(image, seed) -> image`` is applied per training image when
    ``config.augment`` is set.
    """
    images = np.asarray(train_images)
    if images.ndim != 4 or images.shape[0] < 1:
        raise ValueError(f"train_images must be nonempty (n, H, W, C), got shape {images.shape}")
    if config.augment and augment_fn is None:
        from .data import augment as augment_fn  # default pipeline

    start_epoch, step = 0, 0
    history: list[float] = []
    if resume is not None:
        load_into(model, resume)
        start_epoch = int(resume.manifest["epoch"])
        step = int(resume.manifest["step"])
        history = [float(x) for x in resume.manifest["loss_history"]]

    optimizer = Adam(model.params, lr=config.learning_rate,
                     beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
    optimizer.t = step

    n = images.shape[0]
    for epoch in range(start_epoch, config.epochs):
        if config.shuffle:
            order = np.random.default_rng([config.seed, 1, epoch]).permutation(n)
        else:
            order = np.arange(n)
        epoch_losses = []
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            batch = images[idx]
            if config.augment:
                batch = np.stack([
                    augment_fn(batch[j], (config.seed, 2, epoch, int(idx[j])))
                    for j in range(batch.shape[0])
                ])
            epoch_losses.append(train_step(batch, model, optimizer, config.loss_reduction))
            step += 1
        history.append(float(np.mean(epoch_losses)))
        if out_dir is not None and config.checkpoint_every > 0 \
                and (epoch + 1) % config.checkpoint_every == 0:
            ckpt = make_checkpoint(model, seed=config.seed, epoch=epoch + 1, step=step,
                                   loss_history=history, config_digest=config_digest,
                                   train_config=config, data_info=data_info,
                                   scoring_info=scoring_info)
            save_checkpoint(ckpt, out_dir)

    final_epoch = max(config.epochs, start_epoch)
    ckpt = make_checkpoint(model, seed=config.seed, epoch=final_epoch, step=step,
                           loss_history=history, config_digest=config_digest,
                           train_config=config, data_info=data_info,
                           scoring_info=scoring_info)
    if out_dir is not None:
        save_checkpoint(ckpt, out_dir)
    return ckpt
