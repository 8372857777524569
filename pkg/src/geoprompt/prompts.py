"""Class-specific geometric prompts over depth features.

Three learnable prompt vectors attend over the depth feature map to produce
class-activated features; a temperature-scaled contrastive loss pulls each
prompt toward the mask-pooled depth embedding of its own class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

PROMPT_NAMES = ("silhouette", "ligament", "ridge")


@dataclass
class ClassActivatedFeatures:
    features: torch.Tensor  # [B,3,C,S,S]
    attention: torch.Tensor  # [B,3,S,S]

    def __getitem__(self, c: int) -> torch.Tensor:
        return self.features[:, c]


@dataclass
class ReferenceEmbeddings:
    R: torch.Tensor  # [3,C]
    valid: torch.Tensor  # [3] bool


@dataclass
class ContrastiveResult:
    loss: torch.Tensor
    skipped: bool


class GeometricPrompts(nn.Module):
    """Prompt matrix P [3,C], rows (silhouette, ligament, ridge)."""

    def __init__(self, width: int, std: float = 0.02, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.P = nn.Parameter(torch.randn(3, width, generator=g) * std)

    @property
    def width(self) -> int:
        return self.P.shape[1]

    def named_rows(self) -> dict[str, torch.Tensor]:
        return {f"prompt.{n}": self.P[i] for i, n in enumerate(PROMPT_NAMES)}


def prompt_attention(f_d: torch.Tensor, P: torch.Tensor, mode: str = "sigmoid") -> ClassActivatedFeatures:
    """Per-class spatial attention from prompt/feature alignment, applied residually.

    ``mode="sigmoid"`` scores each position independently; ``mode="softmax"``
    normalizes the scores over space and rescales by S*S so a uniform map is 1.
    """
    if f_d.ndim != 4:
        raise ShapeError(f"expected [B,C,S,S] depth features, got {tuple(f_d.shape)}")
    b, c, h, w = f_d.shape
    if P.shape != (3, c):
        raise ShapeError(f"prompts {tuple(P.shape)} do not match depth width {c}")
    logits = torch.einsum("kc,bchw->bkhw", P, f_d) / math.sqrt(c)
    if mode == "sigmoid":
        attn = torch.sigmoid(logits)
    elif mode == "softmax":
        attn = logits.flatten(2).softmax(-1).view(b, 3, h, w) * (h * w)
    else:
        raise ConfigError(f"unknown attention mode {mode!r}")
    f = f_d.unsqueeze(1)
    feats = f + attn.unsqueeze(2) * f
    return ClassActivatedFeatures(feats, attn)


def reference_embeddings(f_d: torch.Tensor, masks: torch.Tensor, present=None,
                         threshold: float | None = None, eps: float = 1e-6) -> ReferenceEmbeddings:
    """Masked average pooling of depth features per class, over batch and space.

    Masks [B,3,H,W] are area-downsampled to the feature grid. With a numeric
    ``threshold`` the pooled coverage is binarized at it; with ``None`` the
    coverage fraction itself weights each cell.
    """
    if f_d.ndim == 3:
        f_d = f_d.unsqueeze(0)
    if masks.ndim == 3:
        masks = masks.unsqueeze(0)
    b, c, s1, s2 = f_d.shape
    if masks.shape[:2] != (b, 3):
        raise ShapeError(f"masks {tuple(masks.shape)} do not match features {tuple(f_d.shape)}")
    m = masks.to(f_d.dtype)
    if m.shape[2:] != (s1, s2):
        m = F.adaptive_avg_pool2d(m, (s1, s2))
    if threshold is not None:
        m = (m >= threshold).to(f_d.dtype)
    if present is not None:
        pres = torch.as_tensor(present, dtype=torch.bool, device=f_d.device)
        if pres.ndim == 1:
            pres = pres.expand(b, 3)
        m = m * pres.view(b, 3, 1, 1).to(m.dtype)
    m = m.detach()
    area = m.sum(dim=(0, 2, 3))
    R = torch.einsum("bkhw,bchw->kc", m, f_d) / (area + eps).unsqueeze(1)
    valid = area > 0
    R = torch.where(valid.unsqueeze(1), R, torch.zeros_like(R))
    return ReferenceEmbeddings(R, valid)


def contrastive_prompt_loss(P: torch.Tensor, ref: ReferenceEmbeddings, tau: float = 0.07,
                            similarity: str = "cosine") -> ContrastiveResult:
    """Negated log-softmax of prompt/reference similarity, averaged over valid classes."""
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    valid = ref.valid
    if not bool(valid.any()):
        return ContrastiveResult(P.sum() * 0.0, True)
    p = P[valid]
    r = ref.R[valid]
    if similarity == "cosine":
        sim = F.normalize(p, dim=1) @ F.normalize(r, dim=1).T
    elif similarity == "dot":
        sim = p @ r.T
    else:
        raise ConfigError(f"unknown similarity {similarity!r}")
    logp = (sim / tau).log_softmax(dim=1)
    return ContrastiveResult(-logp.diagonal().mean(), False)
