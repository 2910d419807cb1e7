"""Per-pixel anomaly score maps and the image-level anomaly score.

The score map takes, at every pixel, the square root of the channel-mean of
squared differences between an image and its reconstruction. An optional
separable Gaussian smoothing (kernel radius ``ceil(3*sigma)``, normalized to
unit mass, reflect-padded) disperses per-pixel scores; the image-level
anomaly score is the maximum over the (optionally smoothed) map.

Maps export as 16-bit grayscale PNG (min-max normalized, with the
normalization constants in a JSON sidecar) and as raw little-endian float32.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
from PIL import Image


def score_map(original, reconstructed) -> np.ndarray:
    """Per-pixel channel-pooled reconstruction error, shape (H, W), >= 0."""
    x = np.asarray(original, dtype=np.float64)
    y = np.asarray(reconstructed, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: original {x.shape} vs reconstructed {y.shape}")
    if x.ndim == 2:
        x = x[..., None]
        y = y[..., None]
    if x.ndim != 3:
        raise ValueError(f"expected (H, W, C) or (H, W) images, got shape {x.shape}")
    return np.sqrt(np.mean((x - y) ** 2, axis=-1))


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian with radius ceil(3*sigma)."""
    radius = math.ceil(3.0 * sigma)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    return kernel / kernel.sum()


def gaussian_smooth(values, sigma: float) -> np.ndarray:
    """Separable Gaussian convolution with reflect boundaries; sigma=0 is identity."""
    m = np.asarray(values, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D score map, got shape {m.shape}")
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return m
    kernel = gaussian_kernel1d(sigma)
    radius = (kernel.size - 1) // 2
    if radius >= m.shape[0] or radius >= m.shape[1]:
        raise ValueError(
            f"kernel radius {radius} too large for map extent {m.shape} under reflect padding"
        )
    out = np.pad(m, ((radius, radius), (0, 0)), mode="reflect")
    acc = np.zeros_like(m)
    for k in range(kernel.size):
        acc += kernel[k] * out[k:k + m.shape[0], :]
    out = np.pad(acc, ((0, 0), (radius, radius)), mode="reflect")
    acc = np.zeros_like(m)
    for k in range(kernel.size):
        acc += kernel[k] * out[:, k:k + m.shape[1]]
    return acc


def anomaly_score(values) -> float:
    """Maximum of the score map."""
    m = np.asarray(values)
    if m.size == 0:
        raise ValueError("anomaly score of an empty map is undefined")
    return float(m.max())


def write_score_map_raw(values, path) -> Path:
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(values, dtype="<f4").tobytes())
    return path


def write_score_map_png(values, path) -> dict:
    """16-bit grayscale PNG, min-max normalized; returns the constants used."""
    m = np.asarray(values, dtype=np.float64)
    lo, hi = float(m.min()), float(m.max())
    scaled = np.zeros_like(m) if hi == lo else (m - lo) / (hi - lo)
    encoded = np.round(scaled * 65535.0).astype("<u2")
    Image.fromarray(encoded).save(Path(path), format="PNG")  # uint16 -> 16-bit gray
    return {"min": lo, "max": hi, "encoding": "uint16-minmax"}


def export_score_map(values, base_path, sigma: float | None = None,
                     smoothed: bool = False) -> dict:
    """Write ``<base>.png``, ``<base>.f32``, and ``<base>.json`` sidecar."""
    base = Path(base_path)
    if base.suffix == ".png":
        base = base.with_suffix("")
    m = np.asarray(values, dtype=np.float64)
    constants = write_score_map_png(m, base.with_suffix(".png"))
    write_score_map_raw(m, base.with_suffix(".f32"))
    sidecar = {
        "height": int(m.shape[0]),
        "width": int(m.shape[1]),
        "smoothed": bool(smoothed),
        "sigma": float(sigma) if sigma is not None else None,
        "anomaly_score": anomaly_score(m),
        "png": base.with_suffix(".png").name,
        "raw": base.with_suffix(".f32").name,
        "raw_dtype": "<f4",
        **constants,
    }
    base.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return sidecar
