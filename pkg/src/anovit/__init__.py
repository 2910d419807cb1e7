"""Unsupervised image anomaly detection and localization.

A vision-transformer encoder-decoder reconstruction model (``anovit``) and a
convolutional-autoencoder baseline (``cae``), trained from scratch on normal
images only. Anomalies are detected by per-pixel reconstruction error: a
channel-pooled score map localizes defects and its maximum is the image-level
anomaly score, both evaluated with exact rank-based AUROC.
"""

from .autodiff import (
    GeometryError,
    GradCheckReport,
    Parameter,
    ParameterStore,
    ShapeError,
    Tensor,
    grad_check,
    no_grad,
)
from .cae import CaeConfig, ConvAutoencoder, ConvBlockSpec
from .config import ConfigError, RunConfig, build_model, config_digest, load_run_config, model_from_checkpoint
from .data import (
    DatasetError,
    OneClassSplit,
    SynthSpec,
    augment,
    generate_synth,
    load_mvtec_layout,
    load_oneclass_split,
)
from .decoder import (
    ConvDecoder,
    DecoderBlockSpec,
    DecoderConfig,
    VitAutoencoder,
    flatten_feature_map,
    rearrange_feature_map,
)
from .estimators import AnovitDetector, CaeDetector
from .evaluation import EvalReport, auroc, evaluate, evaluate_detection, evaluate_localization
from .scoring import anomaly_score, gaussian_smooth, score_map
from .training import (
    Adam,
    Checkpoint,
    CheckpointError,
    TrainConfig,
    TrainingError,
    fit,
    load_checkpoint,
    reconstruction_loss,
    save_checkpoint,
    train_step,
)
from .vit import EncoderConfig, ViTEncoder, extract_patches, multi_head_attention, self_attention

__version__ = "0.1.0"

__all__ = [
    "Adam", "AnovitDetector", "CaeConfig", "CaeDetector", "Checkpoint",
    "CheckpointError", "ConfigError", "ConvAutoencoder", "ConvBlockSpec",
    "ConvDecoder", "DatasetError", "DecoderBlockSpec", "DecoderConfig",
    "EncoderConfig", "EvalReport", "GeometryError", "GradCheckReport",
    "OneClassSplit", "Parameter", "ParameterStore", "RunConfig", "ShapeError",
    "SynthSpec", "Tensor", "TrainConfig", "TrainingError", "ViTEncoder",
    "VitAutoencoder", "anomaly_score", "augment", "auroc", "build_model",
    "config_digest", "evaluate", "evaluate_detection", "evaluate_localization",
    "extract_patches", "fit", "flatten_feature_map", "gaussian_smooth",
    "generate_synth", "grad_check", "load_checkpoint", "load_mvtec_layout",
    "load_oneclass_split", "load_run_config", "model_from_checkpoint",
    "multi_head_attention", "no_grad", "rearrange_feature_map",
    "reconstruction_loss", "save_checkpoint", "score_map", "self_attention",
    "train_step", "__version__",
]
