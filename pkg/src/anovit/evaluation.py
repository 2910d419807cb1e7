"""AUROC evaluation at image level (detection) and pixel level (localization).

AUROC is computed exactly from ranks (Mann-Whitney form) with midrank tie
handling: it equals the probability that a uniformly random anomalous score
exceeds a uniformly random normal score, ties counted one half. No threshold
grid is involved, so the value is invariant under strictly monotone
transformations of the scores.

Localization pools every test pixel's (optionally smoothed) score with its
mask label across the whole test set; a seeded uniform subsample bounds the
pixel count when a budget is configured.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scoring import anomaly_score, gaussian_smooth, score_map


def auroc(scores, labels) -> float:
    """Exact rank-based AUROC; labels are 1 = anomalous, 0 = normal."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores ({s.shape}) and labels ({y.shape}) differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 (normal) or 1 (anomalous)")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0:
        raise ValueError("AUROC undefined: no anomalous (label 1) samples")
    if n_neg == 0:
        raise ValueError("AUROC undefined: no normal (label 0) samples")
    order = np.argsort(s, kind="stable")
    sorted_scores = s[order]
    # midranks: ties share the average of their 1-based rank range
    boundaries = np.flatnonzero(sorted_scores[1:] != sorted_scores[:-1]) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [s.size]))
    mid = (starts + ends - 1) / 2.0 + 1.0
    ranks = np.empty(s.size, dtype=np.float64)
    ranks[order] = np.repeat(mid, ends - starts)
    pos_rank_sum = ranks[y == 1].sum()
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _reconstruct_batched(model, images: np.ndarray, batch_size: int) -> np.ndarray:
    outs = []
    for lo in range(0, images.shape[0], batch_size):
        outs.append(model.reconstruct(images[lo:lo + batch_size]))
    return np.concatenate(outs, axis=0)


def image_scores(model, images: np.ndarray, sigma: float = 4.0,
                 smooth: bool = True, batch_size: int = 16) -> np.ndarray:
    """Anomaly score per image: max over the (optionally smoothed) score map."""
    recon = _reconstruct_batched(model, images, batch_size)
    scores = np.empty(images.shape[0], dtype=np.float64)
    for i in range(images.shape[0]):
        m = score_map(images[i], recon[i])
        if smooth:
            m = gaussian_smooth(m, sigma)
        scores[i] = anomaly_score(m)
    return scores


def evaluate_detection(model, split, sigma: float = 4.0, smooth: bool = True,
                       batch_size: int = 16) -> tuple[float, np.ndarray]:
    """Image-level AUROC over the test split; returns (auroc, per-image scores)."""
    scores = image_scores(model, split.test, sigma=sigma, smooth=smooth,
                          batch_size=batch_size)
    return auroc(scores, split.test_labels), scores


def evaluate_localization(model, split, sigma: float = 4.0, smooth: bool = True,
                          batch_size: int = 16, pixel_budget: int | None = None,
                          subsample_seed: int = 0, per_image: bool = False) -> float:
    """Pixel-level AUROC against the mask labels.

    The default pools every test pixel globally; ``per_image=True`` instead
    averages per-image AUROCs over the images that contain both pixel classes
    (a diagnostic view that weights images equally regardless of defect size).
    """
    if split.test_masks is None:
        raise ValueError(
            f"localization on {split.category!r} requires pixel ground-truth masks"
        )
    images = split.test
    masks = split.test_masks
    if masks.shape[:3] != images.shape[:3]:
        raise ValueError(
            f"mask extents {masks.shape[:3]} do not match images {images.shape[:3]}"
        )
    recon = _reconstruct_batched(model, images, batch_size)
    all_scores = np.empty(images.shape[:3], dtype=np.float64)
    for i in range(images.shape[0]):
        m = score_map(images[i], recon[i])
        if smooth:
            m = gaussian_smooth(m, sigma)
        all_scores[i] = m
    if per_image:
        values = []
        for i in range(images.shape[0]):
            mask = masks[i].ravel()
            if 0 < mask.sum() < mask.size:
                values.append(auroc(all_scores[i].ravel(), mask))
        if not values:
            raise ValueError("no test image contains both pixel classes")
        return float(np.mean(values))
    scores = all_scores.ravel()
    labels = masks.reshape(-1).astype(np.int8)
    if pixel_budget is not None and scores.size > pixel_budget:
        rng = np.random.default_rng([subsample_seed, 4])
        keep = rng.choice(scores.size, size=pixel_budget, replace=False)
        keep.sort()
        scores = scores[keep]
        labels = labels[keep]
    return auroc(scores, labels)


@dataclass
class EvalReport:
    """One model/category evaluation row; serializes to the report.json schema."""

    model: str
    dataset: str
    category: str
    image_auroc: float | None
    pixel_auroc: float | None
    n_normal: int
    n_anomalous: int
    sigma: float | None
    config_digest: str

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "dataset": self.dataset,
            "category": self.category,
            "image_auroc": self.image_auroc,
            "pixel_auroc": self.pixel_auroc,
            "n_normal": self.n_normal,
            "n_anomalous": self.n_anomalous,
            "sigma": self.sigma,
            "config_digest": self.config_digest,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


def evaluate(model, split, task: str, *, dataset: str = "", sigma: float = 4.0,
             smooth: bool = True, batch_size: int = 16,
             pixel_budget: int | None = None, subsample_seed: int = 0,
             config_digest: str = "") -> EvalReport:
    """Run one evaluation task ("det" or "loc") and assemble the report row."""
    if task not in ("det", "loc"):
        raise ValueError(f"task must be 'det' or 'loc', got {task!r}")
    labels = np.asarray(split.test_labels)
    image_auroc = pixel_auroc = None
    if task == "det":
        image_auroc, _ = evaluate_detection(model, split, sigma=sigma, smooth=smooth,
                                            batch_size=batch_size)
    else:
        pixel_auroc = evaluate_localization(model, split, sigma=sigma, smooth=smooth,
                                            batch_size=batch_size,
                                            pixel_budget=pixel_budget,
                                            subsample_seed=subsample_seed)
    return EvalReport(
        model=model.kind,
        dataset=dataset,
        category=split.category,
        image_auroc=image_auroc,
        pixel_auroc=pixel_auroc,
        n_normal=int((labels == 0).sum()),
        n_anomalous=int((labels == 1).sum()),
        sigma=float(sigma) if smooth else None,
        config_digest=config_digest,
    )


def write_report(report: EvalReport, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def _fmt(value: float | None) -> str:
    return "-" if value is None else f"{value:.3f}"


def format_report_table(reports: list[EvalReport],
                        baselines: list[EvalReport] | None = None) -> str:
    """Render reports as a fixed-width table, with a relative-improvement
    column when a baseline report for the same category is supplied."""
    by_cat = {}
    if baselines:
        by_cat = {(b.dataset, b.category): b for b in baselines}
    header = f"{'category':<16} {'model':<8} {'image AUROC':>12} {'pixel AUROC':>12}"
    if by_cat:
        header += f" {'rel. improvement':>18}"
    lines = [header, "-" * len(header)]
    for r in reports:
        row = f"{r.category:<16} {r.model:<8} {_fmt(r.image_auroc):>12} {_fmt(r.pixel_auroc):>12}"
        base = by_cat.get((r.dataset, r.category))
        if by_cat:
            cell = "-"
            if base is not None:
                ours = r.image_auroc if r.image_auroc is not None else r.pixel_auroc
                theirs = base.image_auroc if r.image_auroc is not None else base.pixel_auroc
                if ours is not None and theirs:
                    cell = f"{100.0 * (ours - theirs) / theirs:+.2f}% vs {base.model}"
            row += f" {cell:>18}"
        lines.append(row)
    return "\n".join(lines)
