"""Segmentation and error-localization metrics plus the comparison baselines
(confidence thresholding and the simple error-correction net's agreement mask)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor


def new_confusion(num_classes: int) -> np.ndarray:
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def accumulate_confusion(cm: np.ndarray, pred: np.ndarray, true: np.ndarray) -> np.ndarray:
    """Add per-pixel counts; rows = ground truth, columns = prediction."""
    pred = np.asarray(pred).reshape(-1)
    true = np.asarray(true).reshape(-1)
    if pred.shape != true.shape:
        raise ValueError(f"pred/true shapes differ: {pred.shape} vs {true.shape}")
    c = cm.shape[0]
    if pred.size == 0:
        return cm
    if pred.min() < 0 or pred.max() >= c or true.min() < 0 or true.max() >= c:
        raise ValueError(f"class index out of range [0, {c})")
    cm += np.bincount(true * c + pred, minlength=c * c).reshape(c, c)
    return cm


def per_class_iou(cm: np.ndarray) -> np.ndarray:
    """IoU per class; NaN where the class is absent from both pred and truth."""
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    with np.errstate(invalid="ignore"):
        return np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)


def miou(cm: np.ndarray) -> float:
    """Mean IoU over classes present in prediction or ground truth."""
    if cm.sum() == 0:
        raise ValueError("confusion matrix is empty")
    ious = per_class_iou(cm)
    if np.isnan(ious).all():
        raise ValueError("all classes degenerate")
    return float(np.nanmean(ious))


@dataclass
class LocalizationReport:
    """Image-averaged precision/recall for 'marked valid' as the positive
    class, with F1 derived from the averaged precision and recall."""

    precision: float
    recall: float
    f1: float
    num_images: int
    empty_valid_images: int = 0
    empty_correct_images: int = 0

    def to_dict(self) -> dict:
        return {
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "num_images": self.num_images,
            "empty_valid_images": self.empty_valid_images,
            "empty_correct_images": self.empty_correct_images,
        }


def localization_metrics(predicted_valid: np.ndarray,
                         true_correct: np.ndarray) -> LocalizationReport:
    """Per-image precision/recall of a validity mask against the correctness
    ground truth, averaged over images.

    An image with no valid (resp. no correct) pixels contributes 0 to
    precision (resp. recall) and is counted in the report.
    """
    pv = np.asarray(predicted_valid).astype(bool)
    tc = np.asarray(true_correct).astype(bool)
    if pv.shape != tc.shape:
        raise ValueError(f"shape mismatch: {pv.shape} vs {tc.shape}")
    if pv.ndim == 2:
        pv, tc = pv[None], tc[None]
    precisions, recalls = [], []
    empty_valid = empty_correct = 0
    for v, c in zip(pv, tc):
        hit = float(np.logical_and(v, c).sum())
        nv, nc = float(v.sum()), float(c.sum())
        if nv == 0:
            empty_valid += 1
            precisions.append(0.0)
        else:
            precisions.append(hit / nv)
        if nc == 0:
            empty_correct += 1
            recalls.append(0.0)
        else:
            recalls.append(hit / nc)
    p = float(np.mean(precisions))
    r = float(np.mean(recalls))
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return LocalizationReport(precision=p, recall=r, f1=f1, num_images=len(precisions),
                              empty_valid_images=empty_valid,
                              empty_correct_images=empty_correct)


def threshold_mask(probs: Tensor, t: float) -> Tensor:
    """1 where the max class probability is >= t (no extra network)."""
    if not 0.0 < t < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {t}")
    return (probs.max(dim=1).values >= t).to(probs.dtype)


def secn_valid_mask(corrected: Tensor, original: Tensor) -> Tensor:
    """Agreement mask for the error-correction baseline: 1 where the
    corrected argmax equals the original prediction's argmax."""
    return (corrected.argmax(dim=1) == original.argmax(dim=1)).to(original.dtype)


@torch.no_grad()
def confusion_from_model(model, samples, num_classes: int, batch_size: int = 16) -> np.ndarray:
    """Accumulate a confusion matrix of a model's argmax over labeled samples."""
    cm = new_confusion(num_classes)
    model.eval()
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = torch.from_numpy(np.stack([s.image for s in chunk]))
        labels = np.stack([s.label for s in chunk])
        out = model(images)
        pred = out.probs[0].argmax(dim=1).cpu().numpy()
        accumulate_confusion(cm, pred, labels)
    return cm
