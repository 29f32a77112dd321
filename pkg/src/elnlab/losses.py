"""Training objectives for both stages.

All losses are pure functions of their tensor inputs (plus an explicit
numpy Generator where subsampling applies) and work at any float dtype.
Sums over pixels are realized as per-pixel means so loss magnitudes stay
independent of image size. Composite losses return ``(scalar, diagnostics)``
where the dict carries per-term values, gate states, and valid-pixel counts
for step logging.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import ConfigurationError

_LOG_EPS = 1e-12


@dataclass
class ContrastiveConfig:
    """Temperature and batch-wide pair-sampling caps for the pixel
    contrastive loss."""

    temperature: float = 0.5
    max_anchors: int = 64
    max_positives: int = 16
    max_negatives: int = 64
    seed: int = 0

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ConfigurationError("contrastive temperature must be > 0")
        if min(self.max_anchors, self.max_positives, self.max_negatives) < 1:
            raise ConfigurationError("contrastive sampling caps must be >= 1")


def _check_labels(labels: Tensor, num_classes: int) -> None:
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(
            f"labels out of range [0, {num_classes}): "
            f"min {int(labels.min())}, max {int(labels.max())}")


def _gather_label_probs(probs: Tensor, labels: Tensor) -> Tensor:
    # probs [B, C, H, W], labels [B, H, W] -> [B, H, W]
    return probs.gather(1, labels.unsqueeze(1)).squeeze(1)


def per_image_ce(probs: Tensor, labels: Tensor) -> Tensor:
    """Per-image pixel-mean cross-entropy, shape [B]."""
    _check_labels(labels, probs.shape[1])
    p = _gather_label_probs(probs, labels)
    return -(p.clamp_min(_LOG_EPS).log()).mean(dim=(1, 2))


def ce_loss(probs: Tensor, labels: Tensor) -> Tensor:
    """Pixel-wise cross-entropy -ln p[y], averaged over every pixel."""
    _check_labels(labels, probs.shape[1])
    p = _gather_label_probs(probs, labels)
    return -(p.clamp_min(_LOG_EPS).log()).mean()


def sup_loss(probs: Tensor, labels: Tensor) -> Tensor:
    """Supervised loss: mean of per-image cross-entropy over the batch."""
    if probs.shape[0] == 0:
        raise ValueError("sup_loss requires a non-empty batch")
    return per_image_ce(probs, labels).mean()


def aux_loss(main_probs: Tensor, aux_probs: Sequence[Tensor], labels: Tensor,
             alphas: Sequence[float]) -> tuple[Tensor, dict]:
    """Constrained cross-entropy over the auxiliary decoders.

    Decoder k's per-image CE contributes only while it exceeds
    alpha_k * (main decoder's per-image CE); the gate and the threshold are
    constants for the step, so a closed gate yields exactly zero gradient
    and the main branch never receives gradient from this loss.
    """
    if len(aux_probs) != len(alphas):
        raise ValueError(f"{len(aux_probs)} aux decoders but {len(alphas)} alphas")
    diag: dict = {"gates": [], "aux_ce": [], "gate_fraction": 1.0}
    if not aux_probs:
        return main_probs.new_zeros(()), diag
    main_ce = per_image_ce(main_probs, labels).detach()
    diag["main_ce"] = float(main_ce.mean())
    total = main_probs.new_zeros(())
    open_count = 0
    for k, (probs_k, alpha_k) in enumerate(zip(aux_probs, alphas)):
        ce_k = per_image_ce(probs_k, labels)
        gate = (ce_k.detach() > alpha_k * main_ce).to(ce_k.dtype)
        total = total + (gate * ce_k).mean()
        open_count += int(gate.sum())
        diag["gates"].append([int(g) for g in gate])
        diag["aux_ce"].append(float(ce_k.detach().mean()))
    diag["gate_fraction"] = open_count / (len(aux_probs) * labels.shape[0])
    return total, diag


def correctness_mask(probs: Tensor, labels: Tensor) -> Tensor:
    """1 where the argmax prediction equals the label, else 0 (shape [B, H, W])."""
    pred = probs.argmax(dim=1)
    return (pred == labels).to(probs.dtype)


def weighted_bce(validity: Tensor, mask: Tensor) -> tuple[Tensor, dict]:
    """Class-balanced binary cross-entropy against a correctness mask.

    Incorrect-pixel (mask = 0) terms are re-weighted by the per-image ratio
    #correct / #incorrect; correct-pixel terms are unweighted; the result is
    the per-pixel mean. An image whose mask is all zeros has no defined
    weight: it falls back to unweighted BCE and is counted in the
    diagnostics as a warning record.
    """
    if validity.dim() == 4:
        validity = validity.squeeze(1)
    if validity.shape != mask.shape:
        raise ValueError(f"validity shape {tuple(validity.shape)} != mask {tuple(mask.shape)}")
    mask = mask.to(validity.dtype)
    n1 = mask.sum(dim=(1, 2))
    n0 = (1.0 - mask).sum(dim=(1, 2))
    fallback = n1 == 0
    weight = torch.where(n0 > 0, n1 / n0.clamp_min(1.0), torch.zeros_like(n1))
    weight = torch.where(fallback, torch.ones_like(weight), weight)
    v = validity.clamp(_LOG_EPS, 1.0 - _LOG_EPS)
    pos = mask * (-v.log())
    neg = (1.0 - mask) * (-(1.0 - v).log()) * weight.view(-1, 1, 1)
    loss = (pos + neg).sum(dim=(1, 2)).div(mask[0].numel()).mean()
    diag = {
        "weights": [float(x) for x in weight],
        "fallback_images": int(fallback.sum()),
    }
    return loss, diag


def eln_loss(validities: Sequence[Tensor], masks: Sequence[Tensor]) -> tuple[Tensor, dict]:
    """Mean of ``weighted_bce`` over the K+1 decoder prediction/mask pairs."""
    if len(validities) != len(masks):
        raise ValueError(f"{len(validities)} validity maps but {len(masks)} masks")
    if not validities:
        raise ValueError("eln_loss requires at least the main decoder pair")
    terms, per_decoder, fallbacks = [], [], 0
    for v, m in zip(validities, masks):
        term, d = weighted_bce(v, m)
        terms.append(term)
        per_decoder.append(float(term.detach()))
        fallbacks += d["fallback_images"]
    loss = torch.stack(terms).mean()
    return loss, {"per_decoder": per_decoder, "fallback_images": fallbacks}


def labeled_total(sup: Tensor, aux: Tensor, eln: Tensor) -> Tensor:
    """First-stage objective: supervised + auxiliary + error-net terms."""
    return sup + aux + eln


def pseudo_labels(teacher_probs: Tensor) -> Tensor:
    """Per-pixel argmax of teacher probabilities; ties go to the lowest class."""
    return teacher_probs.argmax(dim=1)


def validity_to_mask(validity: Tensor) -> Tensor:
    """Round a validity probability map to {0, 1}; exactly 0.5 rounds to 1."""
    if validity.dim() == 4:
        validity = validity.squeeze(1)
    return (validity >= 0.5).to(validity.dtype)


def pseudo_loss(student_probs: Tensor, pseudo: Tensor,
                validity: Tensor) -> tuple[Tensor, dict]:
    """Self-training cross-entropy restricted to pixels the validity map keeps.

    Sum of -ln p[pseudo] over pixels with rounded validity 1, divided by
    max(1, #valid). Masked pixels contribute exactly zero gradient; an empty
    mask yields loss 0.
    """
    mask = validity_to_mask(validity.detach()).to(student_probs.dtype)
    _check_labels(pseudo, student_probs.shape[1])
    p = _gather_label_probs(student_probs, pseudo)
    terms = mask * (-(p.clamp_min(_LOG_EPS).log()))
    n_valid = mask.sum()
    loss = terms.sum() / n_valid.clamp_min(1.0)
    diag = {
        "valid_count": int(n_valid),
        "valid_fraction": float(n_valid) / mask.numel(),
    }
    return loss, diag


def _subsample(rng: np.random.Generator, candidates: np.ndarray, cap: int) -> np.ndarray:
    if candidates.size <= cap:
        return candidates
    return rng.choice(candidates, size=cap, replace=False)


def contrastive_index(classes: np.ndarray, valid: np.ndarray, cfg: ContrastiveConfig,
                      rng: np.random.Generator) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    """Build the batch-wide anchor/positive/negative index sets.

    Anchors are valid pixels (subsampled to ``max_anchors``). For anchor i,
    positives are valid pixels sharing its class (including the same pixel
    location on the teacher side) and negatives are valid pixels of any
    other class, each capped per config.
    """
    valid_idx = np.flatnonzero(valid)
    if valid_idx.size == 0:
        return valid_idx, [], []
    anchors = _subsample(rng, valid_idx, cfg.max_anchors)
    valid_classes = classes[valid_idx]
    positives, negatives = [], []
    for a in anchors:
        same = valid_idx[valid_classes == classes[a]]
        diff = valid_idx[valid_classes != classes[a]]
        positives.append(_subsample(rng, same, cfg.max_positives))
        negatives.append(_subsample(rng, diff, cfg.max_negatives))
    return anchors, positives, negatives


def contrastive_loss(student_emb: Tensor, teacher_emb: Tensor, pseudo: Tensor,
                     validity: Tensor, cfg: ContrastiveConfig,
                     rng: np.random.Generator | None = None) -> tuple[Tensor, dict]:
    """Batch-wide pixel contrastive loss over valid pixels.

    With d(a, b) = exp(cos(a, b) / temperature), each anchor i accumulates
    -ln[ d(f_i, t_j) / (d(f_i, t_j) + sum_n d(f_i, t_n)) ] over its positive
    pixels j and negative pixels n, where t is the (gradient-free) teacher
    embedding; the total is divided by the number of anchors. Returns 0 when
    no pixel is valid.
    """
    cfg.validate()
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if student_emb.shape != teacher_emb.shape:
        raise ValueError("student/teacher embedding shapes differ")
    if validity.dim() == 4:
        validity = validity.squeeze(1)
    if pseudo.shape != validity.shape or pseudo.shape[-2:] != student_emb.shape[-2:]:
        raise ValueError("pseudo/validity maps must match the embedding resolution")

    d = student_emb.shape[1]
    flat_s = student_emb.permute(0, 2, 3, 1).reshape(-1, d)
    flat_t = teacher_emb.detach().permute(0, 2, 3, 1).reshape(-1, d)
    classes = pseudo.reshape(-1).cpu().numpy()
    valid = (validity.detach().reshape(-1) >= 0.5).cpu().numpy()

    anchors, positives, negatives = contrastive_index(classes, valid, cfg, rng)
    diag = {"num_valid": int(valid.sum()), "num_anchors": int(anchors.size), "num_pairs": 0}
    if anchors.size == 0:
        return student_emb.new_zeros(()), diag

    s = F.normalize(flat_s[torch.as_tensor(np.ascontiguousarray(anchors), device=student_emb.device)], dim=1)
    t = F.normalize(flat_t, dim=1)

    max_p = max(len(p) for p in positives)
    max_n = max((len(n) for n in negatives), default=0)
    a = anchors.size
    pos_idx = np.zeros((a, max_p), dtype=np.int64)
    pos_pad = np.zeros((a, max_p), dtype=bool)
    neg_idx = np.zeros((a, max(max_n, 1)), dtype=np.int64)
    neg_pad = np.zeros((a, max(max_n, 1)), dtype=bool)
    for i, (p, n) in enumerate(zip(positives, negatives)):
        pos_idx[i, :len(p)] = p
        pos_pad[i, :len(p)] = True
        neg_idx[i, :len(n)] = n
        neg_pad[i, :len(n)] = True

    device = student_emb.device
    pos_t = t[torch.as_tensor(pos_idx, device=device)]          # [A, P, D]
    neg_t = t[torch.as_tensor(neg_idx, device=device)]          # [A, N, D]
    pos_mask = torch.as_tensor(pos_pad, device=device)
    neg_mask = torch.as_tensor(neg_pad, device=device, dtype=s.dtype)

    d_pos = torch.exp((s.unsqueeze(1) * pos_t).sum(-1) / cfg.temperature)  # [A, P]
    d_neg = torch.exp((s.unsqueeze(1) * neg_t).sum(-1) / cfg.temperature)  # [A, N]
    neg_sum = (d_neg * neg_mask).sum(dim=1, keepdim=True)                  # [A, 1]
    log_ratio = torch.log(d_pos / (d_pos + neg_sum))
    loss = -(log_ratio * pos_mask.to(s.dtype)).sum() / a
    diag["num_pairs"] = int(pos_pad.sum())
    return loss, diag


def unlabeled_total(pseudo: Tensor, contra: Tensor) -> Tensor:
    """Second-stage unlabeled objective: self-training + contrastive terms."""
    return pseudo + contra
