"""Segmentation, anatomic and total objectives."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F

from .errors import NumericError, ShapeError


def dice_loss(prob: torch.Tensor, target: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """1 - (2 sum(p t) + eps) / (sum p + sum t + eps), summed over every element given."""
    inter = (prob * target).sum()
    return 1 - (2 * inter + eps) / (prob.sum() + target.sum() + eps)


def bce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Pixel-mean binary cross-entropy on logits (log-sum-exp form)."""
    return F.binary_cross_entropy_with_logits(logits, target.to(logits.dtype), reduction="mean")


def segmentation_loss(logits: torch.Tensor, masks: torch.Tensor, eps: float = 1.0):
    """Mean over the three classes of dice + BCE; returns (loss, per-class dice, per-class bce).

    Works on [3,H,W] or [B,3,H,W]; in the batched case every class term is
    computed per frame and averaged over the batch.
    """
    if logits.shape != masks.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} vs masks {tuple(masks.shape)}")
    if logits.ndim == 3:
        logits, masks = logits.unsqueeze(0), masks.unsqueeze(0)
    masks = masks.to(logits.dtype)
    prob = torch.sigmoid(logits)
    inter = (prob * masks).sum(dim=(-2, -1))
    dice = 1 - (2 * inter + eps) / (prob.sum(dim=(-2, -1)) + masks.sum(dim=(-2, -1)) + eps)
    dice = dice.mean(dim=0)
    bce = F.binary_cross_entropy_with_logits(logits, masks, reduction="none").mean(dim=(0, 2, 3))
    return (dice + bce).mean(), dice, bce


def anatomic_target(masks: torch.Tensor) -> torch.Tensor:
    """Pixelwise union of the landmark masks, keeping a singleton channel."""
    return masks.amax(dim=-3, keepdim=True)


def anatomic_loss(anatomic_prob: torch.Tensor, masks: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    target = anatomic_target(masks)
    return torch.stack([dice_loss(anatomic_prob[b], target[b], eps) for b in range(target.shape[0])]).mean()


TERMS = ("seg", "cl", "ana")


def _check_finite(name: str, value, step=None) -> None:
    v = float(value.detach()) if torch.is_tensor(value) else float(value)
    if not math.isfinite(v):
        where = f" at step {step}" if step is not None else ""
        raise NumericError(f"loss term {name!r} is {v}{where}")


def total_loss(seg, cl, ana, lambdas=(1.0, 1.0, 1.0), step=None):
    """Weighted sum in fixed (seg, cl, ana) order; non-finite terms abort."""
    terms = (seg, cl, ana)
    for name, t in zip(TERMS, terms):
        _check_finite(name, t, step)
    total = lambdas[0] * seg
    total = total + lambdas[1] * cl
    total = total + lambdas[2] * ana
    return total


@dataclass
class LossReport:
    total: float
    seg: float
    cl: float
    ana: float
    per_class_dice: tuple = ()
    per_class_bce: tuple = ()
    lambdas: tuple = (1.0, 1.0, 1.0)
    cl_skipped: bool = False
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)
