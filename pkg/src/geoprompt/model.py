"""The full landmark network and its composite objective."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import TrainConfig
from .decoder import Decoder, LandmarkPrediction
from .encoders import DualEncoder
from .fusion import BFU, SGA, AnatomicHead, AugmentedFeature, ConcatFuse, PromptMerge
from .losses import LossReport, anatomic_loss, segmentation_loss, total_loss
from .prompts import GeometricPrompts, contrastive_prompt_loss, prompt_attention, reference_embeddings


@dataclass
class ModelOutput:
    logits: torch.Tensor  # [B,3,H,W]
    anatomic_prob: torch.Tensor | None
    depth_feature: torch.Tensor
    attention: torch.Tensor | None = None
    augmented: AugmentedFeature | None = None

    @property
    def probs(self) -> torch.Tensor:
        return torch.sigmoid(self.logits)

    def prediction(self) -> LandmarkPrediction:
        return LandmarkPrediction(self.logits, self.anatomic_prob)


class LandmarkNet(nn.Module):
    def __init__(self, cfg: TrainConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c = cfg.common_width
        ab = cfg.ablation
        self.encoder = DualEncoder(cfg.encoder_config(), cfg.backbones.rgb, cfg.backbones.depth)
        self.fuse = BFU(c, cfg.se_reduction) if ab.bfu else ConcatFuse(c)
        self.prompts = GeometricPrompts(c, seed=cfg.seed) if ab.dpe else None
        if ab.sga:
            self.sga = SGA(c)
            self.anatomic_head = AnatomicHead(c)
        elif ab.dpe:
            self.prompt_merge = PromptMerge(c)
        self.decoder = Decoder(c)

    def frozen_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if not p.requires_grad]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def forward(self, rgb: torch.Tensor, depth: torch.Tensor) -> ModelOutput:
        size = rgb.shape[-2:]
        bundle = self.encoder(rgb, depth)
        f_rgb, f_d = bundle.f_rgb, bundle.depth_feature
        f_f = self.fuse(f_rgb, f_d)
        attention = None
        if self.prompts is not None:
            activated = prompt_attention(f_d, self.prompts.P, self.cfg.attention_mode)
            f_g, attention = activated.features, activated.attention
        else:
            f_g = f_d.unsqueeze(1).expand(-1, 3, -1, -1, -1)
        augmented = anatomic_prob = None
        if self.cfg.ablation.sga:
            augmented = self.sga(f_g, f_f)
            x = augmented.decoder_input
            anatomic_prob, _ = self.anatomic_head(augmented.anatomic_feature, size)
        elif self.prompts is not None:
            x = self.prompt_merge(f_g, f_f)
        else:
            x = f_f
        logits = self.decoder(x, bundle.skips, size)
        return ModelOutput(logits, anatomic_prob, f_d, attention, augmented)


def compute_losses(model: LandmarkNet, out: ModelOutput, masks: torch.Tensor, present: torch.Tensor,
                   step: int | None = None) -> tuple[torch.Tensor, LossReport]:
    """Weighted total of segmentation, contrastive and anatomic terms (disabled terms are 0)."""
    cfg = model.cfg
    seg, dice, bce = segmentation_loss(out.logits, masks)
    zero = out.logits.sum() * 0.0
    cl, skipped = zero, False
    if cfg.ablation.cl:
        thr = cfg.ref_threshold if cfg.ref_threshold >= 0 else None
        ref = reference_embeddings(out.depth_feature, masks, present, threshold=thr)
        res = contrastive_prompt_loss(model.prompts.P, ref, cfg.tau, cfg.similarity)
        cl, skipped = res.loss, res.skipped
    ana = anatomic_loss(out.anatomic_prob, masks) if out.anatomic_prob is not None else zero
    total = total_loss(seg, cl, ana, cfg.lambdas, step=step)
    report = LossReport(
        total=total.item(), seg=seg.item(), cl=cl.item(), ana=ana.item(),
        per_class_dice=tuple(dice.tolist()), per_class_bce=tuple(bce.tolist()),
        lambdas=tuple(cfg.lambdas), cl_skipped=skipped,
    )
    return total, report
