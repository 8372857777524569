"""CNN decoder from the stride-16 decoder input to three landmark logit maps."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import WiringError
from .fusion import conv_block


@dataclass
class LandmarkPrediction:
    logits: torch.Tensor  # [B,3,H,W]
    anatomic_prob: torch.Tensor | None = None  # [B,1,H,W]

    @property
    def probs(self) -> torch.Tensor:
        return torch.sigmoid(self.logits)


class Decoder(nn.Module):
    """Three 2x stages (bilinear up, 3x3 conv, norm, relu); widths halve from ``channels``.

    The first two stages concatenate the stride-8 and stride-4 RGB skips.
    """

    def __init__(self, channels: int, skip_channels: tuple[int, int] = (128, 64)):
        super().__init__()
        c1, c2, c3 = channels // 2, channels // 4, channels // 8
        self.skip_channels = skip_channels
        self.stage1 = conv_block(channels + skip_channels[0], c1, 3)
        self.stage2 = conv_block(c1 + skip_channels[1], c2, 3)
        self.stage3 = conv_block(c2, c3, 3)
        self.head = nn.Conv2d(c3, 3, 1)

    def forward(self, x: torch.Tensor, skips: list[torch.Tensor], size) -> torch.Tensor:
        if len(skips) != 2 or skips[0] is None or skips[1] is None:
            raise WiringError("decoder needs the stride-4 and stride-8 skip features")
        s4, s8 = skips
        for skip, want in ((s8, x.shape[-1] * 2), (s4, x.shape[-1] * 4)):
            if skip.shape[-1] != want:
                raise WiringError(f"skip at spatial size {skip.shape[-1]}, expected {want}")
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.stage1(torch.cat([x, s8], dim=1))
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.stage2(torch.cat([x, s4], dim=1))
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.stage3(x)
        return F.interpolate(self.head(x), size=size, mode="bilinear", align_corners=False)


def decode(decoder_input: torch.Tensor, skips: list[torch.Tensor], decoder: Decoder, size) -> LandmarkPrediction:
    return LandmarkPrediction(decoder(decoder_input, skips, size))
