"""
Vision-language heads: projection of backbone and text features into a shared
unit-norm space, plus the learnable contrastive logit scale.
"""

import math
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core.errors import ValidationError
from .vit import FlexiViT

LOGIT_SCALE_INIT = math.log(1 / 0.07)
LOGIT_SCALE_MAX = math.log(100.0)
DEFAULT_PROJ_DIM = 1024


class VLMHeads(nn.Module):
    def __init__(self, embed_dim: int, text_dim: int, proj_dim: int = DEFAULT_PROJ_DIM):
        super().__init__()
        self.vision_proj = nn.Linear(2 * embed_dim, proj_dim, bias=False)
        self.text_proj = nn.Linear(text_dim, proj_dim)
        self.logit_scale = nn.Parameter(torch.tensor(LOGIT_SCALE_INIT))
        nn.init.trunc_normal_(self.vision_proj.weight, std=0.02)
        nn.init.trunc_normal_(self.text_proj.weight, std=0.02)
        nn.init.zeros_(self.text_proj.bias)

    @property
    def temperature(self) -> torch.Tensor:
        """Multiplier applied to cosine similarities, exp(s) > 0."""
        return self.logit_scale.exp()

    @torch.no_grad()
    def clamp_logit_scale(self, max_value: float = LOGIT_SCALE_MAX) -> None:
        self.logit_scale.clamp_(max=max_value)

    def project_text(self, text_features: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.text_proj(text_features), dim=-1, eps=1e-12)


def _unit(z: torch.Tensor) -> torch.Tensor:
    norms = z.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise ValidationError("Projection produced a zero vector; head parameters are degenerate")
    return z / norms


def project_vision(cls: torch.Tensor, patch_mean: torch.Tensor, heads: VLMHeads) -> torch.Tensor:
    """concat(cls, patch_mean) -> linear -> L2 normalize.

    Raises:
        ValidationError: If the projection is exactly zero
    """
    if cls.shape != patch_mean.shape:
        raise ValidationError(f"CLS {tuple(cls.shape)} and patch mean {tuple(patch_mean.shape)} differ")
    return _unit(heads.vision_proj(torch.cat((cls, patch_mean), dim=-1)))


class VisionLanguageModel(nn.Module):
    """Backbone + text encoder + heads, used for Phase 3 and zero-shot inference."""

    def __init__(self, backbone: FlexiViT, text_encoder: nn.Module, heads: VLMHeads):
        super().__init__()
        self.backbone = backbone
        self.text_encoder = text_encoder
        self.heads = heads

    def embed_volume(self, volumes: torch.Tensor, mask=None, runtime_patch=None) -> torch.Tensor:
        out = self.backbone(volumes, mask=mask, runtime_patch=runtime_patch)
        return project_vision(out.cls, out.patch_mean, self.heads)

    def embed_text(self, texts: Sequence[str], max_len=None) -> torch.Tensor:
        feats = self.text_encoder.encode(list(texts), max_len=max_len)
        return self.heads.project_text(feats.to(self.heads.text_proj.weight.dtype))
