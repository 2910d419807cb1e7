"""Dataset ingestion, augmentation, and a synthetic defect-image generator.

Two on-disk layouts are supported:

  - MVTec-style one-class layout::

        <root>/<category>/train/good/*.png
        <root>/<category>/test/<defect_type>/*.png
        <root>/<category>/ground_truth/<defect_type>/*_mask.png

    ``test/good`` images are labelled normal with all-zero masks; every other
    test image must have a pixel mask.

  - generic class-per-folder layout (``<root>/<class>/*.png``): one class is
    declared normal and used for training, every other class is anomalous at
    test time. No pixel masks.

Images decode to float32 in [0, 1], are resized with corner-aligned bilinear
interpolation, and grayscale is replicated across channels when the model
wants more than one. PNG is the canonical format; PPM is accepted for
dependency-light fixtures. The synthetic generator writes a fully seeded
MVTec-style dataset (background texture + noise, one connected defect per
anomalous image, exact binary masks) for desk-scale benchmarks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png", ".ppm")

BACKGROUNDS = ("uniform", "stripes", "noise")
DEFECTS = ("square", "line", "blob")


class DatasetError(ValueError):
    """Dataset layout or file contents violate the loader contract."""


@dataclass
class OneClassSplit:
    """Normal-only training images plus a labelled (optionally masked) test set."""

    category: str
    train: np.ndarray                 # (n_train, H, W, C) float32 in [0, 1]
    test: np.ndarray                  # (n_test, H, W, C)
    test_labels: np.ndarray           # (n_test,) int8, 1 = anomalous
    test_masks: np.ndarray | None     # (n_test, H, W) uint8 {0, 1}, or None
    val: np.ndarray | None = None     # optional normal-only validation images
    train_paths: tuple[str, ...] = ()
    test_paths: tuple[str, ...] = ()

    def __post_init__(self):
        if self.test_labels.shape[0] != self.test.shape[0]:
            raise DatasetError("test labels do not align with test images")
        if self.test_masks is not None:
            if self.test_masks.shape[:3] != self.test.shape[:3]:
                raise DatasetError(
                    f"mask extents {self.test_masks.shape} do not match "
                    f"test images {self.test.shape}"
                )
            if not np.isin(self.test_masks, (0, 1)).all():
                raise DatasetError("masks must be binary")


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize; identity when extents already match."""
    img = np.asarray(image, dtype=np.float32)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    h, w, _ = img.shape
    if (h, w) == (out_h, out_w):
        out = img.copy()
        return out[..., 0] if squeeze else out
    ys = np.linspace(0.0, h - 1.0, out_h)
    xs = np.linspace(0.0, w - 1.0, out_w)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    out = (top * (1 - wy) + bottom * wy).astype(np.float32)
    return out[..., 0] if squeeze else out


def to_channels(image: np.ndarray, channels: int) -> np.ndarray:
    """Replicate grayscale to ``channels``; average down to one channel."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[..., None]
    have = img.shape[-1]
    if have == channels:
        return img
    if have == 1:
        return np.repeat(img, channels, axis=-1)
    if channels == 1:
        return img.mean(axis=-1, keepdims=True, dtype=np.float32)
    raise DatasetError(f"cannot convert {have}-channel image to {channels} channels")


def _decode(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.mode in ("RGBA", "P"):
                img = img.convert("RGB")
            elif img.mode == "I;16":
                return np.asarray(img, dtype=np.float32) / 65535.0
            arr = np.asarray(img, dtype=np.float32)
    except (OSError, SyntaxError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


def load_image(path, out_h: int, out_w: int, channels: int) -> np.ndarray:
    """Decode, normalize to [0, 1], resize, and coerce channel count."""
    arr = _decode(Path(path))
    arr = to_channels(arr, channels)
    return resize_bilinear(arr, out_h, out_w)


def load_mask(path, out_h: int, out_w: int) -> np.ndarray:
    """Decode a ground-truth mask, resize, and threshold at 0.5 to {0, 1}."""
    arr = _decode(Path(path))
    if arr.ndim == 3:
        arr = arr.max(axis=-1)
    arr = resize_bilinear(arr, out_h, out_w)
    return (arr > 0.5).astype(np.uint8)


def _list_images(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir()
                  if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())


def load_mvtec_layout(root, category: str, image_size: tuple[int, int] = (32, 32),
                      channels: int = 1) -> OneClassSplit:
    """Load one category from an MVTec-style directory tree."""
    root = Path(root)
    base = root / category
    train_dir = base / "train" / "good"
    test_dir = base / "test"
    if not train_dir.is_dir():
        raise DatasetError(f"missing training directory {train_dir}")
    if not test_dir.is_dir():
        raise DatasetError(f"missing test directory {test_dir}")
    h, w = image_size

    train_paths = _list_images(train_dir)
    if not train_paths:
        raise DatasetError(f"no training images under {train_dir}")
    train = np.stack([load_image(p, h, w, channels) for p in train_paths])

    test_images, labels, masks, test_paths = [], [], [], []
    for defect_dir in sorted(d for d in test_dir.iterdir() if d.is_dir()):
        anomalous = defect_dir.name != "good"
        for path in _list_images(defect_dir):
            test_images.append(load_image(path, h, w, channels))
            labels.append(1 if anomalous else 0)
            test_paths.append(str(path))
            if anomalous:
                mask_path = base / "ground_truth" / defect_dir.name / f"{path.stem}_mask.png"
                if not mask_path.is_file():
                    raise DatasetError(f"missing ground-truth mask {mask_path}")
                masks.append(load_mask(mask_path, h, w))
            else:
                masks.append(np.zeros((h, w), dtype=np.uint8))
    if not test_images:
        raise DatasetError(f"no test images under {test_dir}")
    return OneClassSplit(
        category=category,
        train=train,
        test=np.stack(test_images),
        test_labels=np.asarray(labels, dtype=np.int8),
        test_masks=np.stack(masks),
        train_paths=tuple(str(p) for p in train_paths),
        test_paths=tuple(test_paths),
    )


def load_oneclass_split(root, normal_class: str, image_size: tuple[int, int] = (32, 32),
                        channels: int = 1, val_fraction: float = 0.2,
                        seed: int = 0) -> OneClassSplit:
    """Class-per-folder protocol: train on one class, all others are anomalies.

    The normal class is split into train/validation by a seeded shuffle; the
    test set covers every class (label = class != normal_class). No masks.
    """
    root = Path(root)
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    names = [d.name for d in class_dirs]
    if normal_class not in names:
        raise DatasetError(f"unknown class {normal_class!r}; available: {names}")
    h, w = image_size

    normal_paths = _list_images(root / normal_class)
    if not normal_paths:
        raise DatasetError(f"normal class {normal_class!r} has no training images")
    order = np.random.default_rng([seed, 5]).permutation(len(normal_paths))
    n_val = int(round(val_fraction * len(normal_paths)))
    val_idx = set(order[:n_val].tolist())
    train_paths = [p for i, p in enumerate(normal_paths) if i not in val_idx]
    val_paths = [p for i, p in enumerate(normal_paths) if i in val_idx]
    if not train_paths:
        raise DatasetError(f"validation fraction {val_fraction} leaves no training images")

    train = np.stack([load_image(p, h, w, channels) for p in train_paths])
    val = np.stack([load_image(p, h, w, channels) for p in val_paths]) if val_paths else None

    test_images, labels, test_paths = [], [], []
    for class_dir in class_dirs:
        anomalous = class_dir.name != normal_class
        for path in _list_images(class_dir):
            test_images.append(load_image(path, h, w, channels))
            labels.append(1 if anomalous else 0)
            test_paths.append(str(path))
    return OneClassSplit(
        category=normal_class,
        train=train,
        test=np.stack(test_images),
        test_labels=np.asarray(labels, dtype=np.int8),
        test_masks=None,
        val=val,
        train_paths=tuple(str(p) for p in train_paths),
        test_paths=tuple(test_paths),
    )


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def affine_warp(image: np.ndarray, angle_deg: float, translate: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """Rotate about the center and translate (fractions of extent), sampling
    bilinearly with replicated borders. Zero angle and translation is exact
    identity."""
    img = np.asarray(image, dtype=np.float32)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    h, w, _ = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ty, tx = translate[1] * h, translate[0] * w
    theta = np.deg2rad(angle_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    # inverse map: undo translation, then rotate backwards about the center
    ys = yy - cy - ty
    xs = xx - cx - tx
    src_y = cos_t * ys + sin_t * xs + cy
    src_x = -sin_t * ys + cos_t * xs + cx
    y0 = np.clip(np.floor(src_y), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(src_x), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(src_y - y0, 0.0, 1.0)[..., None]
    wx = np.clip(src_x - x0, 0.0, 1.0)[..., None]
    top = img[y0, x0] * (1 - wx) + img[y0, x1] * wx
    bottom = img[y1, x0] * (1 - wx) + img[y1, x1] * wx
    out = (top * (1 - wy) + bottom * wy).astype(np.float32)
    return out[..., 0] if squeeze else out


def apply_augmentation(image: np.ndarray, *, hflip: bool, vflip: bool,
                       angle_deg: float, translate: tuple[float, float]) -> np.ndarray:
    img = np.asarray(image, dtype=np.float32)
    if hflip:
        img = img[:, ::-1]
    if vflip:
        img = img[::-1, :]
    if angle_deg == 0.0 and translate == (0.0, 0.0):
        return np.ascontiguousarray(img)
    return affine_warp(img, angle_deg, translate)


def augment(image: np.ndarray, seed) -> np.ndarray:
    """Seeded training-time pipeline: horizontal/vertical flip (p = 0.5 each)
    and a small random affine (rotation <= 10 deg, translation <= 5%)."""
    rng = np.random.default_rng(seed)
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    angle = float(rng.uniform(-10.0, 10.0))
    translate = (float(rng.uniform(-0.05, 0.05)), float(rng.uniform(-0.05, 0.05)))
    return apply_augmentation(image, hflip=hflip, vflip=vflip,
                              angle_deg=angle, translate=translate)


# ---------------------------------------------------------------------------
# synthetic defect datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Fully-seeded recipe for a small MVTec-style defect dataset."""

    height: int = 32
    width: int = 32
    background: str = "stripes"
    defect: str = "square"
    delta: float = 0.4
    n_train: int = 64
    n_test_normal: int = 16
    n_test_anomalous: int = 16
    seed: int = 7
    noise_level: float = 0.02
    category: str = "synthetic"

    def __post_init__(self):
        if self.background not in BACKGROUNDS:
            raise ValueError(f"background must be one of {BACKGROUNDS}, got {self.background!r}")
        if self.defect not in DEFECTS:
            raise ValueError(f"defect must be one of {DEFECTS}, got {self.defect!r}")
        if min(self.height, self.width) < 16:
            raise ValueError("canvas must be at least 16x16")
        if self.n_train < 1 or self.n_test_normal < 1 or self.n_test_anomalous < 1:
            raise ValueError("all image counts must be >= 1")

    def to_dict(self) -> dict:
        return {
            "height": self.height, "width": self.width,
            "background": self.background, "defect": self.defect,
            "delta": self.delta, "n_train": self.n_train,
            "n_test_normal": self.n_test_normal,
            "n_test_anomalous": self.n_test_anomalous,
            "seed": self.seed, "noise_level": self.noise_level,
            "category": self.category,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        unknown = set(d) - set(cls().to_dict())
        if unknown:
            raise ValueError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**d)


def _background(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    if spec.background == "uniform":
        img = np.full((h, w), 0.5)
    elif spec.background == "stripes":
        phase = rng.uniform(0.0, 2.0 * np.pi)
        xs = np.arange(w)
        img = np.tile(0.5 + 0.15 * np.sin(2.0 * np.pi * xs / 8.0 + phase), (h, 1))
    else:  # low-frequency noise field
        from .scoring import gaussian_smooth
        field = rng.normal(0.0, 1.0, (h, w))
        field = gaussian_smooth(field, 2.0)
        img = 0.5 + 0.15 * field / max(np.abs(field).max(), 1e-9)
    img = img + rng.normal(0.0, spec.noise_level, (h, w))
    return np.clip(img, 0.0, 1.0)


def _defect_mask(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    mask = np.zeros((h, w), dtype=np.uint8)
    if spec.defect == "square":
        side = int(rng.integers(max(2, h // 8), max(3, h // 4) + 1))
        top = int(rng.integers(0, h - side + 1))
        left = int(rng.integers(0, w - side + 1))
        mask[top:top + side, left:left + side] = 1
    elif spec.defect == "line":
        thickness = int(rng.integers(1, 3))
        if rng.random() < 0.5:
            row = int(rng.integers(0, h - thickness + 1))
            mask[row:row + thickness, :] = 1
        else:
            col = int(rng.integers(0, w - thickness + 1))
            mask[:, col:col + thickness] = 1
    else:  # blob: filled disk
        radius = int(rng.integers(max(2, h // 10), max(3, h // 6) + 1))
        cy = int(rng.integers(radius, h - radius))
        cx = int(rng.integers(radius, w - radius))
        yy, xx = np.ogrid[:h, :w]
        mask[(yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2] = 1
    area = int(mask.sum())
    if not 0 < area < 0.25 * h * w:
        raise AssertionError(f"defect area {area} outside (0, 25%) of canvas")
    return mask


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _save_gray(arr_u8: np.ndarray, path: Path) -> None:
    Image.fromarray(arr_u8, mode="L").save(path, format="PNG")


def generate_synth(spec: SynthSpec, out_dir) -> OneClassSplit:
    """Write a seeded MVTec-style dataset to disk and return the loaded split.

    Normal images are background texture plus pixel noise; each anomalous test
    image carries exactly one connected defect region whose intensity is
    shifted by ``spec.delta`` (seeded sign), with an exact binary mask. All
    pixel values are quantized to the 8-bit grid before writing, so reloading
    through ``load_mvtec_layout`` reproduces the returned arrays losslessly.
    """
    out_dir = Path(out_dir)
    base = out_dir / spec.category
    rng = np.random.default_rng(spec.seed)
    dirs = {
        "train": base / "train" / "good",
        "test_good": base / "test" / "good",
        "test_defect": base / "test" / "defect",
        "truth": base / "ground_truth" / "defect",
    }
    try:
        for d in dirs.values():
            d.mkdir(parents=True, exist_ok=True)

        train = []
        for i in range(spec.n_train):
            img = _quantize(_background(spec, rng))
            _save_gray(img, dirs["train"] / f"{i:03d}.png")
            train.append(img)

        normal_images, anomalous_images, anomalous_masks = [], [], []
        for i in range(spec.n_test_normal):
            img = _quantize(_background(spec, rng))
            _save_gray(img, dirs["test_good"] / f"{i:03d}.png")
            normal_images.append(img)
        for i in range(spec.n_test_anomalous):
            background = _background(spec, rng)
            mask = _defect_mask(spec, rng)
            sign = 1.0 if rng.random() < 0.5 else -1.0
            img = _quantize(background + sign * spec.delta * mask)
            _save_gray(img, dirs["test_defect"] / f"{i:03d}.png")
            _save_gray(mask * np.uint8(255), dirs["truth"] / f"{i:03d}_mask.png")
            anomalous_images.append(img)
            anomalous_masks.append(mask)
        # assemble in the loader's order: test subdirectories sorted by name,
        # so "defect" images come before "good"
        test_images = anomalous_images + normal_images
        labels = [1] * spec.n_test_anomalous + [0] * spec.n_test_normal
        masks = anomalous_masks + [np.zeros((spec.height, spec.width), dtype=np.uint8)
                                   for _ in range(spec.n_test_normal)]

        manifest = {
            "spec": spec.to_dict(),
            "n_train": spec.n_train,
            "n_test": spec.n_test_normal + spec.n_test_anomalous,
            "layout": "mvtec",
        }
        (base / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise DatasetError(f"cannot write synthetic dataset under {out_dir}: {exc}") from exc

    def to_float(u8):
        return (u8.astype(np.float32) / 255.0)[..., None]

    return OneClassSplit(
        category=spec.category,
        train=np.stack([to_float(im) for im in train]),
        test=np.stack([to_float(im) for im in test_images]),
        test_labels=np.asarray(labels, dtype=np.int8),
        test_masks=np.stack(masks),
    )
