"""Segmentation and image-text alignment losses, and the per-level composite."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, InputError, NumericError

DICE_EPS = 1e-5
FOCAL_CLAMP = 1e-6


@dataclass
class LossWeights:
    lambda_dice: float = 1.0
    lambda_focal: float = 1.0
    lambda_siglip: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    siglip_t_init: float = 10.0
    siglip_b_init: float = -10.0
    mode: str = "siglip"
    pairs: str = "both"

    def validate(self) -> None:
        if min(self.lambda_dice, self.lambda_focal, self.lambda_siglip) < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if not 0.0 <= self.focal_alpha <= 1.0:
            raise ConfigurationError("focal_alpha must lie in [0, 1]")
        if self.mode not in ("siglip", "clip_softmax"):
            raise ConfigurationError(f"loss.mode must be 'siglip' or 'clip_softmax', got {self.mode!r}")
        if self.pairs not in ("both", "abnormal_only"):
            raise ConfigurationError(f"loss.pairs must be 'both' or 'abnormal_only', got {self.pairs!r}")
        if self.siglip_t_init <= 0:
            raise ConfigurationError("siglip_t_init must be positive")


@dataclass
class BatchTargets:
    labels: torch.Tensor  # [B] in {0, 1}
    masks: Optional[torch.Tensor] = None  # [B, h, w] in {0, 1}
    has_mask: Optional[torch.Tensor] = None  # [B] bool

    def mask_index(self) -> torch.Tensor:
        if self.masks is None:
            return torch.zeros(0, dtype=torch.long)
        if self.has_mask is None:
            return torch.arange(self.masks.shape[0])
        return torch.nonzero(self.has_mask, as_tuple=False).flatten()


def _same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise InputError(f"shape mismatch: prediction {tuple(a.shape)} vs target {tuple(b.shape)}")


def dice_loss(pred: torch.Tensor, gt: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft Dice loss over the last two axes, averaged over any leading axes."""
    _same_shape(pred, gt)
    gt = gt.to(pred.dtype)
    inter = (pred * gt).sum(dim=(-2, -1))
    denom = pred.sum(dim=(-2, -1)) + gt.sum(dim=(-2, -1))
    return (1 - (2 * inter + eps) / (denom + eps)).mean()


def focal_loss(pred: torch.Tensor, gt: torch.Tensor, gamma: float = 2.0, alpha: float = 0.25) -> torch.Tensor:
    """Binary focal loss, mean over every pixel. ``alpha`` weights positives, ``1 - alpha`` negatives."""
    _same_shape(pred, gt)
    p = pred.clamp(FOCAL_CLAMP, 1 - FOCAL_CLAMP)
    pos = gt.to(pred.dtype)
    p_t = pos * p + (1 - pos) * (1 - p)
    a_t = pos * alpha + (1 - pos) * (1 - alpha)
    return (-a_t * (1 - p_t) ** gamma * torch.log(p_t)).mean()


def _pair_signs(labels: torch.Tensor, dtype) -> torch.Tensor:
    """z[b, j] = +1 where prompt j (0 normal, 1 abnormal) matches label b, else -1."""
    c = labels.to(torch.long)
    onehot = torch.stack([c == 0, c == 1], dim=-1).to(dtype)
    return 2 * onehot - 1


def _check_logits(logits: torch.Tensor, labels: torch.Tensor) -> None:
    if logits.ndim != 2 or logits.shape[-1] != 2 or logits.shape[0] != labels.shape[0]:
        raise InputError(f"expected logits [B, 2] matching labels [B], got {tuple(logits.shape)}")
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite image-level logits")


def siglip_loss(logits: torch.Tensor, labels: torch.Tensor, t, b, pairs: str = "both") -> torch.Tensor:
    """Sigmoid pairwise loss: mean over pairs of ``log(1 + exp(z * (-t * l + b)))``.

    Matched pairs (z = +1) are pushed towards ``t * l - b -> +inf``.
    """
    _check_logits(logits, labels)
    z = _pair_signs(labels, logits.dtype)
    per_pair = F.softplus(z * (-t * logits + b))
    if pairs == "abnormal_only":
        per_pair = per_pair[:, 1:]
    elif pairs != "both":
        raise ConfigurationError(f"unknown pairs option {pairs!r}")
    return per_pair.mean()


def clip_softmax_loss(logits: torch.Tensor, labels: torch.Tensor, tau) -> torch.Tensor:
    """Image-to-text softmax cross-entropy over the two prompts."""
    _check_logits(logits, labels)
    return F.cross_entropy(tau * logits, labels.to(torch.long))


def composite_loss(
    level_maps: Sequence[torch.Tensor],
    level_logits: Sequence[torch.Tensor],
    targets: BatchTargets,
    weights: LossWeights,
    t=None,
    b=None,
) -> Tuple[torch.Tensor, Dict[str, object]]:
    """Sum over levels of ``λ1·Dice + λ2·Focal + λ3·Align``.

    ``level_maps[i]`` is [B, h, w] and ``level_logits[i]`` is [B, 2] for level i.
    Segmentation terms use only samples with masks. Returns the total and a
    breakdown whose ``dice``/``focal``/``siglip`` entries are the weighted sums
    over levels and ``per_level`` lists the weighted terms level by level.
    """
    if len(level_maps) != len(level_logits) or not level_maps:
        raise InputError("need one map and one logit pair per level")
    if t is None:
        t = weights.siglip_t_init
    if b is None:
        b = weights.siglip_b_init
    idx = targets.mask_index()
    seg_ok = idx.numel() > 0
    seg_w = weights.lambda_dice + weights.lambda_focal
    if not seg_ok and weights.lambda_siglip == 0 and seg_w > 0:
        raise ConfigurationError("no loss term applicable: no masks in batch and alignment weight is zero")

    total = level_logits[0].new_zeros(())
    sums = {"dice": 0.0, "focal": 0.0, "siglip": 0.0}
    per_level: List[Dict[str, float]] = []
    for m, lg in zip(level_maps, level_logits):
        if weights.mode == "siglip":
            align = siglip_loss(lg, targets.labels, t, b, weights.pairs)
        else:
            align = clip_softmax_loss(lg, targets.labels, t)
        terms = {"siglip": weights.lambda_siglip * align}
        if seg_ok:
            pm, gm = m[idx], targets.masks[idx]
            terms["dice"] = weights.lambda_dice * dice_loss(pm, gm)
            terms["focal"] = weights.lambda_focal * focal_loss(pm, gm, weights.focal_gamma, weights.focal_alpha)
        level_total = sum(terms.values())
        total = total + level_total
        row = {k: float(v.detach()) for k, v in terms.items()}
        per_level.append(row)
        for k, v in row.items():
            sums[k] += v
    breakdown: Dict[str, object] = dict(sums)
    breakdown["total"] = float(total.detach())
    breakdown["per_level"] = per_level
    return total, breakdown
