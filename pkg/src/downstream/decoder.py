"""
PatchDecode: a light upsampling decoder over concatenated intermediate
backbone features.

Each stage doubles the spatial size with a stride-2 transposed convolution
followed by a channels-last layer norm and GELU, so a runtime patch of p needs
exactly log2(p) stages to get back to input resolution.
"""

from dataclasses import dataclass
from enum import Enum
import logging
import math
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from ..core.errors import ValidationError
from ..models.vit import FlexiViT

logger = logging.getLogger(__name__)

MIN_CHANNELS = 16


class DecoderVariant(str, Enum):
    MULTISCALE2D = "multiscale2d"
    PROJECTED3D = "projected3d"


@dataclass
class DecoderConfig:
    source_blocks: Tuple[int, ...] = (3, 7, 11, 15)
    patch_size: int = 16
    variant: DecoderVariant = DecoderVariant.MULTISCALE2D
    n_classes: int = 2

    @property
    def ndim(self) -> int:
        return 2 if DecoderVariant(self.variant) is DecoderVariant.MULTISCALE2D else 3

    @property
    def n_stages(self) -> int:
        return n_upsampling_stages(self.patch_size)

    def validate(self) -> None:
        n_upsampling_stages(self.patch_size)
        if not self.source_blocks:
            raise ValidationError("Decoder needs at least one source block")
        if self.n_classes < 2:
            raise ValidationError(f"n_classes must be >= 2, got {self.n_classes}")


def n_upsampling_stages(patch_size: int) -> int:
    """log2(p) for a power-of-two patch size.

    Raises:
        ValidationError: If p is not a positive power of two
    """
    if patch_size < 1 or patch_size & (patch_size - 1):
        raise ValidationError(f"Patch size {patch_size} is not a power of two")
    return int(math.log2(patch_size))


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of a (B, C, *spatial) tensor."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels, eps=1e-6)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(x.movedim(1, -1)).movedim(-1, 1)


class PatchDecode(nn.Module):
    def __init__(self, embed_dim: int, cfg: DecoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        conv_t = nn.ConvTranspose2d if cfg.ndim == 2 else nn.ConvTranspose3d
        conv = nn.Conv2d if cfg.ndim == 2 else nn.Conv3d
        in_channels = embed_dim * len(cfg.source_blocks)

        self.project: Optional[nn.Module] = None
        if DecoderVariant(cfg.variant) is DecoderVariant.PROJECTED3D:
            self.project = nn.Sequential(conv(in_channels, embed_dim, 1), ChannelLayerNorm(embed_dim))
            in_channels = embed_dim

        stages: List[nn.Module] = []
        channels = in_channels
        for _ in range(cfg.n_stages):
            out = max(channels // 2, MIN_CHANNELS)
            stages.append(nn.Sequential(conv_t(channels, out, kernel_size=2, stride=2),
                                        ChannelLayerNorm(out), nn.GELU()))
            channels = out
        self.stages = nn.ModuleList(stages)
        self.head = conv(channels, cfg.n_classes, 1)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """(B, n_blocks*D, *grid) -> (B, n_classes, *grid * p)."""
        if features.ndim != self.cfg.ndim + 2:
            raise ValidationError(
                f"{self.cfg.variant} decoder expects {self.cfg.ndim}D feature maps, got shape {tuple(features.shape)}")
        x = features if self.project is None else self.project(features)
        for stage in self.stages:
            x = stage(x)
        return self.head(x)


class SegmentationModel(nn.Module):
    """Backbone taps at ``source_blocks`` concatenated channel-wise and decoded."""

    def __init__(self, backbone: FlexiViT, cfg: DecoderConfig, finetune_backbone: bool = True):
        super().__init__()
        bad = [b for b in cfg.source_blocks if not 0 <= b < backbone.cfg.depth]
        if bad:
            raise ValidationError(f"Source blocks {bad} outside [0, {backbone.cfg.depth})")
        self.backbone = backbone
        self.decoder = PatchDecode(backbone.cfg.embed_dim, cfg)
        self.cfg = cfg
        self.finetune_backbone = finetune_backbone
        backbone.requires_grad_(finetune_backbone)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        spatial = x.shape[2:]
        p = self.cfg.patch_size
        if any(s % p for s in spatial):
            raise ValidationError(f"Input size {tuple(spatial)} is not divisible by patch size {p}")
        with torch.set_grad_enabled(self.finetune_backbone and torch.is_grad_enabled()):
            taps = self.backbone.get_intermediate_layers(x, self.cfg.source_blocks, runtime_patch=p)
        return torch.cat(taps, dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.features(x))

    def parameter_groups(self) -> Sequence[dict]:
        groups = [{"params": list(self.decoder.parameters()), "name": "decoder"}]
        if self.finetune_backbone:
            groups.append({"params": [p for p in self.backbone.parameters() if p.requires_grad],
                           "name": "backbone"})
        return groups
