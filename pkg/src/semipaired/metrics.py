"""mIoU from a dataset-level confusion matrix and a Fréchet feature distance.

The Fréchet distance uses a frozen random-conv extractor rather than
Inception, so its values are only comparable between runs that share the
same ``extractor_id``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .core import (
    ConfigError,
    DataError,
    LabelIndexMap,
    RgbImage,
    ValidationError,
    decode_one_hot,
    images_to_tensor,
    labels_to_tensor,
)
from .networks import PerceptualExtractor, is_frozen, perceptual_features
from .synthdata import file_sha256, load_dataset, oracle_segment_batch
from .trainer import load_generator

EIGEN_CLAMP = 1e-10


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValidationError(f"confusion matrix must be square, got {c.shape}")
        if np.any(c < 0):
            raise ValidationError("confusion counts must be non-negative")
        c = c.astype(np.int64)
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def confusion_counts(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    if pred.shape != gt.shape:
        raise ValidationError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    flat = gt.reshape(-1).astype(np.int64) * num_classes + pred.reshape(-1)
    return np.bincount(flat, minlength=num_classes**2).reshape(num_classes, num_classes)


def accumulate_confusion(pred: LabelIndexMap, gt: LabelIndexMap, cm: ConfusionMatrix) -> ConfusionMatrix:
    if pred.num_classes != gt.num_classes or gt.num_classes != cm.num_classes:
        raise ValidationError("class counts of prediction, ground truth and matrix differ")
    return ConfusionMatrix(cm.counts + confusion_counts(pred.grid, gt.grid, cm.num_classes))


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN for classes absent from the ground truth."""
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    gt_total = c.sum(axis=1)
    union = gt_total + c.sum(axis=0) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = tp / union
    iou[gt_total == 0] = np.nan
    return iou


def miou(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValidationError("mIoU of an empty confusion matrix is undefined")
    return float(np.nanmean(per_class_iou(cm)))


@dataclass(frozen=True, eq=False)
class FeatureStats:
    mean: np.ndarray
    covariance: np.ndarray
    n: int
    extractor_id: str

    def __post_init__(self):
        if self.n < 2:
            raise ValidationError("feature statistics need at least 2 samples")
        cov = np.asarray(self.covariance, dtype=np.float64)
        if cov.shape != (self.mean.size, self.mean.size):
            raise ValidationError("covariance shape does not match mean")
        if np.abs(cov - cov.T).max(initial=0.0) > 1e-9:
            raise ValidationError("covariance is not symmetric")


def pooled_features(x: torch.Tensor, extractor: PerceptualExtractor) -> np.ndarray:
    """(B, d) float64 array: each extractor layer spatially averaged and concatenated."""
    with torch.no_grad():
        feats = perceptual_features(x, extractor)
    return torch.cat([f.mean(dim=(2, 3)) for f in feats], dim=1).double().numpy()


def feature_statistics(
    images: Sequence[RgbImage] | torch.Tensor, extractor: PerceptualExtractor, batch_size: int = 64
) -> FeatureStats:
    if not is_frozen(extractor):
        raise ConfigError("feature statistics require a frozen extractor")
    n = len(images)
    if n < 2:
        raise ValidationError("feature statistics need at least 2 images")
    chunks = []
    for i in range(0, n, batch_size):
        batch = images[i : i + batch_size]
        x = batch if isinstance(batch, torch.Tensor) else images_to_tensor(batch)
        chunks.append(pooled_features(x.float(), extractor))
    feats = np.concatenate(chunks)
    mean = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False, ddof=1).reshape(mean.size, mean.size)
    cov = 0.5 * (cov + cov.T)
    return FeatureStats(mean, cov, n, extractor.extractor_id)


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    w = np.where(w > EIGEN_CLAMP, w, 0.0)
    return (v * np.sqrt(w)) @ v.T


def trace_sqrt_product(sigma1: np.ndarray, sigma2: np.ndarray) -> float:
    """Tr((sigma1 sigma2)^1/2) via the symmetric form sigma1^1/2 sigma2 sigma1^1/2."""
    s1 = _psd_sqrt(sigma1)
    m = s1 @ sigma2 @ s1
    w = np.linalg.eigvalsh(0.5 * (m + m.T))
    return float(np.sqrt(np.where(w > EIGEN_CLAMP, w, 0.0)).sum())


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    if a.extractor_id != b.extractor_id:
        raise ValidationError(f"feature stats from different extractors: {a.extractor_id} vs {b.extractor_id}")
    if a.mean.shape != b.mean.shape:
        raise ValidationError("feature dimensions differ")
    diff = a.mean - b.mean
    d = diff @ diff + np.trace(a.covariance) + np.trace(b.covariance)
    d -= 2.0 * trace_sqrt_product(a.covariance, b.covariance)
    return max(float(d), 0.0)


# -- evaluation --------------------------------------------------------------

EVAL_EXTRACTOR_SEED = 2024


@dataclass
class EvalReport:
    miou: float
    per_class_iou: list
    frechet_distance: float
    extractor_id: str
    seeds: dict
    hashes: dict
    num_images: int
    metric_note: str = "frechet_distance is a Fréchet feature distance on a frozen random-conv extractor, not Inception FID"

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "per_class_iou": self.per_class_iou,
            "frechet_distance": self.frechet_distance,
            "extractor_id": self.extractor_id,
            "seeds": self.seeds,
            "hashes": self.hashes,
            "num_images": self.num_images,
            "metric_note": self.metric_note,
        }


def evaluate_images(
    generated: torch.Tensor, labels: np.ndarray, reals: torch.Tensor, extractor: PerceptualExtractor, num_classes: int
) -> tuple[float, np.ndarray, float]:
    """Oracle mIoU of ``generated`` (B,3,H,W) against ``labels`` (B,H,W) and Fréchet distance to ``reals``.

    Returns ``(miou, per_class_iou, frechet_distance)``.
    """
    preds = oracle_segment_batch(generated.permute(0, 2, 3, 1).numpy(), num_classes)
    cm = ConfusionMatrix(confusion_counts(preds, labels, num_classes))
    fd = frechet_distance(feature_statistics(generated, extractor), feature_statistics(reals, extractor))
    return miou(cm), per_class_iou(cm), fd


def generate_for_labels(G, labels: torch.Tensor, seed: int, batch_size: int = 50) -> torch.Tensor:
    """One image per label map; noise drawn from ``default_rng(seed)`` in label order."""
    rng = np.random.default_rng(seed)
    z = torch.from_numpy(rng.standard_normal((labels.shape[0], G.noise_dim), dtype=np.float32))
    out = []
    with torch.no_grad():
        for i in range(0, labels.shape[0], batch_size):
            out.append(G(labels[i : i + batch_size].float(), z[i : i + batch_size]))
    return torch.cat(out)


def evaluate(ckpt, val_dir, seed: int = 0, extractor_seed: int = EVAL_EXTRACTOR_SEED, out=None) -> EvalReport:
    G, meta = load_generator(ckpt)
    samples, spec, _ = load_dataset(val_dir)
    val_hash = file_sha256(Path(val_dir) / "manifest.json")
    train_hash = meta.get("extra", {}).get("dataset_manifest_sha256")
    if train_hash == val_hash:
        raise DataError("validation dataset is the training dataset; evaluate on a held-out set")
    if spec.num_classes != G.num_classes or spec.image_size != G.image_size:
        raise DataError(
            f"validation data ({spec.num_classes} classes, {spec.image_size}px) does not match "
            f"the generator ({G.num_classes} classes, {G.image_size}px)"
        )
    ordered = [samples[k] for k in sorted(samples)]
    labels = labels_to_tensor([s.label for s in ordered], torch.uint8)
    reals = images_to_tensor([s.image for s in ordered])
    gt = np.stack([decode_one_hot(s.label).grid for s in ordered])
    fake = generate_for_labels(G, labels, seed)
    extractor = PerceptualExtractor(extractor_seed)
    m, per_class, fd = evaluate_images(fake, gt, reals, extractor, spec.num_classes)
    report = EvalReport(
        miou=m,
        per_class_iou=[None if np.isnan(v) else float(v) for v in per_class],
        frechet_distance=fd,
        extractor_id=extractor.extractor_id,
        seeds={"noise": seed, "extractor": extractor_seed},
        hashes={
            "checkpoint_sha256": file_sha256(ckpt),
            "val_manifest_sha256": val_hash,
            "train_dataset_manifest_sha256": train_hash,
        },
        num_images=len(ordered),
    )
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(json.dumps(report.to_dict(), indent=1) + "\n")
    return report
