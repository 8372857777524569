"""RGB/depth fusion and class-specific geometric augmentation with reverse attention."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError


def group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(32, channels), channels)


def conv_block(cin: int, cout: int, k: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, k, padding=k // 2), group_norm(cout), nn.ReLU(inplace=True))


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


class SEBlock(nn.Module):
    """Squeeze-and-excitation channel gating."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        if channels < reduction or channels % reduction:
            raise ConfigError(f"SE block needs channels ({channels}) divisible by reduction ({reduction})")
        self.fc1 = nn.Conv2d(channels, channels // reduction, 1)
        self.fc2 = nn.Conv2d(channels // reduction, channels, 1)
        nn.init.zeros_(self.fc1.bias)
        nn.init.zeros_(self.fc2.bias)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        s = x.mean(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.fc2(F.relu(self.fc1(s))))

    def forward(self, x):
        return x * self.gate(x)


class BFU(nn.Module):
    """SE-weighted sum of both streams, then local and global average-pooling branches."""

    def __init__(self, channels: int, reduction: int = 16, local_kernel: int = 3):
        super().__init__()
        self.se_rgb = SEBlock(channels, reduction)
        self.se_depth = SEBlock(channels, reduction)
        self.local_kernel = local_kernel
        self.merge = nn.Conv2d(3 * channels, channels, 1)
        self.norm = group_norm(channels)

    def branches(self, f_rgb, f_d):
        f = self.se_rgb(f_rgb) + self.se_depth(f_d)
        k = self.local_kernel
        # count_include_pad=False keeps the padded mean of a constant map exact
        local = F.avg_pool2d(f, k, stride=1, padding=k // 2, count_include_pad=False)
        glob = f.mean(dim=(2, 3), keepdim=True).expand_as(f)
        return f, local, glob

    def forward(self, f_rgb, f_d):
        _same_shape(f_rgb, f_d, "BFU")
        f, local, glob = self.branches(f_rgb, f_d)
        return F.relu(self.norm(self.merge(torch.cat([f, local, glob], dim=1))))


class ConcatFuse(nn.Module):
    """Ablation stand-in for BFU: concatenation and a 1x1 convolution."""

    def __init__(self, channels: int):
        super().__init__()
        self.merge = nn.Conv2d(2 * channels, channels, 1)
        self.norm = group_norm(channels)

    def forward(self, f_rgb, f_d):
        _same_shape(f_rgb, f_d, "concat fusion")
        return F.relu(self.norm(self.merge(torch.cat([f_rgb, f_d], dim=1))))


@dataclass
class AugmentedFeature:
    F_a: torch.Tensor
    anatomic_logits: torch.Tensor
    anatomic_feature: torch.Tensor
    decoder_input: torch.Tensor

    @property
    def reverse_weights(self) -> torch.Tensor:
        return 1 - torch.sigmoid(self.anatomic_logits)


class SGA(nn.Module):
    """Per-class 3x3 fusion of geometric features with F_f, merged, then reverse anatomic attention."""

    def __init__(self, channels: int):
        super().__init__()
        self.per_class = nn.ModuleList(conv_block(2 * channels, channels, 3) for _ in range(3))
        self.merge = nn.Conv2d(3 * channels, channels, 1)
        self.anatomic = nn.Conv2d(channels, 1, 1)

    def forward(self, f_g: torch.Tensor, f_f: torch.Tensor) -> AugmentedFeature:
        """``f_g`` is [B,3,C,S,S]; ``f_f`` is [B,C,S,S]."""
        if f_g.ndim != 5 or f_g.shape[1] != 3:
            raise ShapeError(f"expected [B,3,C,S,S] class features, got {tuple(f_g.shape)}")
        _same_shape(f_g[:, 0], f_f, "SGA")
        per = [blk(torch.cat([f_g[:, c], f_f], dim=1)) for c, blk in enumerate(self.per_class)]
        f_a = self.merge(torch.cat(per, dim=1))
        logits = self.anatomic(f_a)
        rho = 1 - torch.sigmoid(logits)
        f_ana = rho * f_f
        return AugmentedFeature(f_a, logits, f_ana, f_a + f_ana)


class PromptMerge(nn.Module):
    """Used when prompts are on but SGA is off: 1x1 merge of the class features into F_f."""

    def __init__(self, channels: int):
        super().__init__()
        self.merge = nn.Conv2d(4 * channels, channels, 1)

    def forward(self, f_g, f_f):
        return f_f + self.merge(torch.cat([f_g.flatten(1, 2), f_f], dim=1))


class AnatomicHead(nn.Module):
    """1x1 convolution to one channel, bilinear upsampling, sigmoid."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, 1, 1)

    def forward(self, feature: torch.Tensor, size: int | tuple[int, int]) -> tuple[torch.Tensor, torch.Tensor]:
        logits = F.interpolate(self.conv(feature), size=size, mode="bilinear", align_corners=False)
        return torch.sigmoid(logits), logits


def se_block(f: torch.Tensor, block: SEBlock) -> torch.Tensor:
    return block(f)


def bfu_fuse(f_rgb: torch.Tensor, f_d: torch.Tensor, module: BFU) -> torch.Tensor:
    return module(f_rgb, f_d)


def sga_augment(f_g: torch.Tensor, f_f: torch.Tensor, module: SGA) -> AugmentedFeature:
    return module(f_g, f_f)
