"""RGB and depth encoders.

The residual encoder is a ResNet-34 trunk cut after its stride-16 stage. The
attention encoder is a plain ViT laid out like the SAM image encoder (same
parameter names) so SAM-B weights can be mapped onto it; it is frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.models.resnet import BasicBlock, ResNet

from .errors import ConfigError, LoadError, ShapeError

ENCODER_KINDS = ("residual", "attention")

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class DepthEncoderConfig:
    blocks: int = 4
    embed_dim: int = 192
    patch: int = 16
    heads: int = 3
    frozen: bool = True


@dataclass
class EncoderConfig:
    scale: str = "toy"
    resolution: int = 256
    common_width: int = 256
    depth_encoder: DepthEncoderConfig = field(default_factory=DepthEncoderConfig)
    pretrained_depth_weights: str | None = None
    seed: int = 0

    @classmethod
    def preset(cls, scale: str, **overrides) -> "EncoderConfig":
        if scale == "toy":
            base = dict(resolution=256, depth_encoder=DepthEncoderConfig(4, 192, 16, 3))
        elif scale == "paper":
            base = dict(resolution=1024, depth_encoder=DepthEncoderConfig(12, 768, 16, 12))
        else:
            raise ConfigError(f"unknown scale {scale!r}")
        base.update(overrides)
        return cls(scale=scale, **base)

    def validate(self) -> None:
        d = self.depth_encoder
        if self.resolution % 16 or self.resolution % d.patch:
            raise ConfigError(f"resolution {self.resolution} must be divisible by 16 and the patch size {d.patch}")
        if d.patch != 16:
            raise ConfigError("the attention encoder must run at stride 16 (patch=16)")
        if d.embed_dim % d.heads:
            raise ConfigError(f"embed_dim {d.embed_dim} not divisible by heads {d.heads}")


@dataclass
class EncoderBundle:
    """``rgb_features`` at strides 4, 8, 16; the last one is F_rgb."""

    rgb_features: list[torch.Tensor]
    depth_feature: torch.Tensor
    common_width: int

    @property
    def f_rgb(self) -> torch.Tensor:
        return self.rgb_features[-1]

    @property
    def skips(self) -> list[torch.Tensor]:
        return self.rgb_features[:2]


def _check_input(x: torch.Tensor, channels: int, resolution: int | None = None) -> None:
    if x.ndim != 4 or x.shape[1] != channels:
        raise ShapeError(f"expected [B,{channels},H,W] input, got {tuple(x.shape)}")
    if x.shape[2] != x.shape[3]:
        raise ShapeError(f"input must be square, got {tuple(x.shape[2:])}")
    if x.shape[2] % 16:
        raise ShapeError(f"input side {x.shape[2]} not divisible by 16")
    if resolution is not None and x.shape[2] != resolution:
        raise ShapeError(f"input side {x.shape[2]} != configured resolution {resolution}")


class _Normalize(nn.Module):
    def __init__(self):
        super().__init__()
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1), persistent=False)

    def forward(self, x):
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        return (x - self.mean) / self.std


# --------------------------------------------------------------------------
# residual (CNN) encoder
# --------------------------------------------------------------------------


class ResidualTrunk(ResNet):
    """ResNet-34 stem + stages 1-3 (widths 64/128/256); the stride-32 stage is dropped."""

    def __init__(self):
        super().__init__(BasicBlock, [3, 4, 6, 3])
        del self.layer4, self.avgpool, self.fc

    def forward(self, x):
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        s4 = self.layer1(x)
        s8 = self.layer2(s4)
        s16 = self.layer3(s8)
        return s4, s8, s16


class ResidualStream(nn.Module):
    """Trainable CNN stream: returns features at strides 4, 8 and the projected stride-16 map."""

    def __init__(self, common_width: int, in_channels: int = 3):
        super().__init__()
        self.in_channels = in_channels
        self.norm = _Normalize()
        self.trunk = ResidualTrunk()
        self.proj = nn.Conv2d(256, common_width, 1)

    def forward(self, x):
        _check_input(x, self.in_channels)
        s4, s8, s16 = self.trunk(self.norm(x))
        return [s4, s8, self.proj(s16)]


# --------------------------------------------------------------------------
# attention (ViT) encoder
# --------------------------------------------------------------------------


class PatchEmbed(nn.Module):
    def __init__(self, patch: int, dim: int):
        super().__init__()
        self.proj = nn.Conv2d(3, dim, patch, stride=patch)

    def forward(self, x):
        return self.proj(x).permute(0, 2, 3, 1)  # B,S,S,D


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, h, w, d = x.shape
        qkv = self.qkv(x).reshape(b, h * w, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q @ k.transpose(-2, -1)) * (q.shape[-1] ** -0.5)
        out = attn.softmax(dim=-1) @ v
        out = out.transpose(1, 2).reshape(b, h, w, d)
        return self.proj(out)


class MLPBlock(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.lin1 = nn.Linear(dim, hidden)
        self.lin2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.lin2(F.gelu(self.lin1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = MLPBlock(dim, 4 * dim)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class AttentionEncoder(nn.Module):
    """Global-attention ViT returning a [B,D,S,S] token grid at stride ``patch``."""

    def __init__(self, cfg: DepthEncoderConfig, resolution: int, seed: int = 0):
        super().__init__()
        grid = resolution // cfg.patch
        self.patch_embed = PatchEmbed(cfg.patch, cfg.embed_dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, grid, grid, cfg.embed_dim))
        self.blocks = nn.ModuleList(Block(cfg.embed_dim, cfg.heads) for _ in range(cfg.blocks))
        self.embed_dim = cfg.embed_dim
        self._seeded_init(seed)

    @torch.no_grad()
    def _seeded_init(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif "norm" in name:
                p.fill_(1.0)
            elif name == "pos_embed":
                p.normal_(0, 0.02, generator=g)
            else:
                fan_in = p[0].numel()
                p.normal_(0, 1 / math.sqrt(fan_in), generator=g)

    def forward(self, x):
        x = self.patch_embed(x)
        pos = self.pos_embed
        if pos.shape[1:3] != x.shape[1:3]:
            pos = resize_pos_embed(pos, x.shape[1])
        x = x + pos
        for blk in self.blocks:
            x = blk(x)
        return x.permute(0, 3, 1, 2)


def resize_pos_embed(pos: torch.Tensor, grid: int) -> torch.Tensor:
    p = F.interpolate(pos.permute(0, 3, 1, 2), size=(grid, grid), mode="bicubic", align_corners=False)
    return p.permute(0, 2, 3, 1)


def freeze(module: nn.Module) -> None:
    for p in module.parameters():
        p.requires_grad_(False)


# SAM checkpoint key -> our key. Keys not listed (neck.*, attn.rel_pos_*) are skipped.
SAM_NAME_MAP = {
    "image_encoder.patch_embed.proj.weight": "patch_embed.proj.weight",
    "image_encoder.patch_embed.proj.bias": "patch_embed.proj.bias",
    "image_encoder.pos_embed": "pos_embed",
}
SAM_BLOCK_KEYS = (
    "norm1.weight", "norm1.bias", "attn.qkv.weight", "attn.qkv.bias", "attn.proj.weight",
    "attn.proj.bias", "norm2.weight", "norm2.bias", "mlp.lin1.weight", "mlp.lin1.bias",
    "mlp.lin2.weight", "mlp.lin2.bias",
)


def map_sam_state_dict(state: dict, blocks: int) -> dict:
    """Rename SAM image-encoder entries to AttentionEncoder names."""
    table = dict(SAM_NAME_MAP)
    for i in range(blocks):
        for k in SAM_BLOCK_KEYS:
            table[f"image_encoder.blocks.{i}.{k}"] = f"blocks.{i}.{k}"
    out = {}
    for k, v in state.items():
        key = k if k.startswith("image_encoder.") else "image_encoder." + k
        if key in table:
            out[table[key]] = v
    return out


def load_attention_weights(encoder: AttentionEncoder, path: str | Path) -> None:
    state = torch.load(str(path), map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "model" in state and isinstance(state["model"], dict):
        state = state["model"]
    mapped = map_sam_state_dict(state, len(encoder.blocks))
    own = encoder.state_dict()
    if "pos_embed" in mapped and mapped["pos_embed"].shape[1:3] != own["pos_embed"].shape[1:3] \
            and mapped["pos_embed"].shape[-1] == own["pos_embed"].shape[-1]:
        mapped["pos_embed"] = resize_pos_embed(mapped["pos_embed"].float(), own["pos_embed"].shape[1])
    missing = sorted(set(own) - set(mapped))
    bad = [f"{k}: checkpoint {tuple(mapped[k].shape)} vs model {tuple(own[k].shape)}"
           for k in own if k in mapped and mapped[k].shape != own[k].shape]
    if bad or missing:
        lines = bad + [f"{k}: missing from checkpoint" for k in missing]
        raise LoadError(f"incompatible attention-encoder weights in {path}:\n  " + "\n  ".join(lines))
    encoder.load_state_dict({k: v.to(own[k].dtype) for k, v in mapped.items()})


class AttentionStream(nn.Module):
    """Frozen ViT + trainable 1x1 neck to the common width.

    With ``with_skips`` the stream also emits stride-8/4 maps through trainable
    transposed convolutions so it can stand in for the RGB encoder.
    """

    def __init__(self, cfg: EncoderConfig, in_channels: int, with_skips: bool = False, seed: int = 0):
        super().__init__()
        d = cfg.depth_encoder
        self.in_channels = in_channels
        self.norm = _Normalize()
        self.encoder = AttentionEncoder(d, cfg.resolution, seed=seed)
        if cfg.pretrained_depth_weights:
            load_attention_weights(self.encoder, cfg.pretrained_depth_weights)
        self.frozen = d.frozen
        if d.frozen:
            freeze(self.encoder)
        self.neck = nn.Conv2d(d.embed_dim, cfg.common_width, 1)
        self.with_skips = with_skips
        if with_skips:
            self.up8 = nn.Sequential(nn.ConvTranspose2d(d.embed_dim, 128, 2, stride=2), nn.GroupNorm(8, 128), nn.ReLU(True))
            self.up4 = nn.Sequential(nn.ConvTranspose2d(d.embed_dim, 64, 4, stride=4), nn.GroupNorm(8, 64), nn.ReLU(True))

    def train(self, mode: bool = True):
        super().train(mode)
        if self.frozen:
            self.encoder.eval()
        return self

    def forward(self, x):
        _check_input(x, self.in_channels)
        tokens = self.encoder(self.norm(x))
        out = self.neck(tokens)
        if self.with_skips:
            return [self.up4(tokens), self.up8(tokens), out]
        return [out]


class DualEncoder(nn.Module):
    """RGB and depth streams under a backbone assignment (rgb_kind, depth_kind)."""

    def __init__(self, cfg: EncoderConfig, rgb_kind: str = "residual", depth_kind: str = "attention"):
        super().__init__()
        cfg.validate()
        for kind in (rgb_kind, depth_kind):
            if kind not in ENCODER_KINDS:
                raise ConfigError(f"unknown encoder kind {kind!r}; choose from {ENCODER_KINDS}")
        self.cfg = cfg
        self.assignment = (rgb_kind, depth_kind)
        if rgb_kind == "residual":
            self.rgb = ResidualStream(cfg.common_width, 3)
        else:
            self.rgb = AttentionStream(cfg, 3, with_skips=True, seed=cfg.seed + 1)
        if depth_kind == "residual":
            self.depth = ResidualStream(cfg.common_width, 1)
        else:
            self.depth = AttentionStream(cfg, 1, seed=cfg.seed)

    def forward(self, rgb: torch.Tensor, depth: torch.Tensor) -> EncoderBundle:
        _check_input(rgb, 3, self.cfg.resolution)
        _check_input(depth, 1, self.cfg.resolution)
        rgb_feats = self.rgb(rgb)
        f_d = self.depth(depth)[-1]
        return EncoderBundle(rgb_feats, f_d, self.cfg.common_width)


def encode_rgb(rgb: torch.Tensor, encoder: DualEncoder) -> list[torch.Tensor]:
    _check_input(rgb, 3, encoder.cfg.resolution)
    return encoder.rgb(rgb)


def encode_depth(depth: torch.Tensor, encoder: DualEncoder) -> torch.Tensor:
    _check_input(depth, 1, encoder.cfg.resolution)
    return encoder.depth(depth)[-1]


def swap_backbones(cfg: EncoderConfig, assignment: tuple[str, str]) -> DualEncoder:
    return DualEncoder(cfg, *assignment)
