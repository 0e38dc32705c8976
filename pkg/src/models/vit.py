"""
Dual 2D/3D vision transformer backbone.

The 2D and 3D paths share every transformer block, the CLS token and the
register tokens; they differ only in the patch embedding kernel and the RoPE
table, chosen from the input dimensionality.
"""

from dataclasses import dataclass
import logging
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from timm.layers import DropPath, Mlp, trunc_normal_
from timm.models.vision_transformer import LayerScale

from ..core.errors import ValidationError
from .flexi_embed import DEFAULT_BASE_PATCH, PatchEmbedND
from .rope import DEFAULT_ROPE_BASE, RopeND, apply_rope

logger = logging.getLogger(__name__)


@dataclass
class BackboneConfig:
    embed_dim: int = 864
    depth: int = 16
    heads: int = 12
    mlp_ratio: float = 4.0
    drop_path: float = 0.2
    layer_scale_init: float = 1e-5
    n_registers: int = 4
    base_patch: int = DEFAULT_BASE_PATCH
    in_chans: int = 1
    rope_base: float = DEFAULT_ROPE_BASE

    @classmethod
    def preset(cls, name: str) -> 'BackboneConfig':
        if name == "full":
            return cls()
        if name == "toy":
            return cls(embed_dim=48, depth=4, heads=2)
        raise ValidationError(f"Unknown backbone preset: {name!r}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def validate(self) -> None:
        if self.embed_dim % self.heads:
            raise ValidationError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.head_dim % 4 or self.head_dim % 6:
            raise ValidationError(f"Head dim {self.head_dim} must be divisible by 4 and 6 for 2D/3D RoPE")
        if self.depth < 1:
            raise ValidationError("depth must be >= 1")

    def default_source_blocks(self) -> List[int]:
        """Four evenly spaced block ids ending at the last block."""
        d = self.depth
        return sorted({max(d * k // 4 - 1, 0) for k in (1, 2, 3, 4)})


@dataclass
class TokenSequence:
    """Backbone output: [CLS] + registers + patch tokens, batched."""
    features: torch.Tensor  # (B, 1 + n_registers + N, D)
    grid_shape: Tuple[int, ...]
    n_registers: int

    @property
    def cls(self) -> torch.Tensor:
        return self.features[:, 0]

    @property
    def registers(self) -> torch.Tensor:
        return self.features[:, 1:1 + self.n_registers]

    @property
    def patches(self) -> torch.Tensor:
        return self.features[:, 1 + self.n_registers:]

    @property
    def patch_mean(self) -> torch.Tensor:
        return self.patches.mean(dim=1)

    def patch_grid(self) -> torch.Tensor:
        b, _, d = self.features.shape
        return self.patches.transpose(1, 2).reshape(b, d, *self.grid_shape)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, rope: Optional[Tuple[torch.Tensor, torch.Tensor]],
                n_prefix: int) -> torch.Tensor:
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        if rope is not None:
            q, k = apply_rope(q, k, rope[0], rope[1], n_prefix)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(b, t, d))


class Block(nn.Module):
    def __init__(self, cfg: BackboneConfig, drop_path: float):
        super().__init__()
        dim = cfg.embed_dim
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, cfg.heads)
        self.ls1 = LayerScale(dim, init_values=cfg.layer_scale_init)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * cfg.mlp_ratio), act_layer=nn.GELU)
        self.ls2 = LayerScale(dim, init_values=cfg.layer_scale_init)
        self.drop_path = DropPath(drop_path) if drop_path > 0.0 else nn.Identity()

    def forward(self, x, rope, n_prefix):
        x = x + self.drop_path(self.ls1(self.attn(self.norm1(x), rope, n_prefix)))
        return x + self.drop_path(self.ls2(self.mlp(self.norm2(x))))


class FlexiViT(nn.Module):
    """Full-attention ViT over 2D slices or 3D volumes with a shared trunk."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed_2d = PatchEmbedND(d, 2, cfg.base_patch, cfg.in_chans)
        self.patch_embed_3d = PatchEmbedND(d, 3, cfg.base_patch, cfg.in_chans)
        self.rope_2d = RopeND(cfg.head_dim, 2, cfg.rope_base)
        self.rope_3d = RopeND(cfg.head_dim, 3, cfg.rope_base)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.register_tokens = nn.Parameter(torch.zeros(1, cfg.n_registers, d))
        self.mask_token = nn.Parameter(torch.zeros(d))
        rates = [cfg.drop_path * i / max(cfg.depth - 1, 1) for i in range(cfg.depth)]
        self.blocks = nn.ModuleList(Block(cfg, r) for r in rates)
        self.norm = nn.LayerNorm(d, eps=1e-6)
        self._init_weights()

    def _init_weights(self) -> None:
        nn.init.normal_(self.cls_token, std=1e-6)
        nn.init.normal_(self.register_tokens, std=1e-6)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    @property
    def n_prefix(self) -> int:
        return 1 + self.cfg.n_registers

    def patch_embed(self, ndim: int) -> PatchEmbedND:
        if ndim == 2:
            return self.patch_embed_2d
        if ndim == 3:
            return self.patch_embed_3d
        raise ValidationError(f"Input must be a batch of 2D or 3D arrays, got {ndim} spatial dims")

    def embed_patches(self, x: torch.Tensor, runtime_patch: Optional[int] = None):
        """Pre-RoPE patch tokens (B, N, D) and the patch grid shape."""
        grid = self.patch_embed(x.ndim - 2)(x, runtime_patch)
        grid_shape = tuple(grid.shape[2:])
        if any(g == 0 for g in grid_shape):
            raise ValidationError(f"Patch grid {grid_shape} has an empty axis")
        return grid.flatten(2).transpose(1, 2), grid_shape

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None,
                runtime_patch: Optional[int] = None) -> TokenSequence:
        tokens, grid_shape = self.embed_patches(x, runtime_patch)
        if mask is not None:
            mask = mask.reshape(tokens.shape[0], -1).to(torch.bool)
            tokens = torch.where(mask[..., None], self.mask_token.to(tokens.dtype), tokens)
        return self.encode_tokens(tokens, grid_shape)

    def _run_blocks(self, tokens, grid_shape, use_rope: bool, collect: Sequence[int] = ()):
        b = tokens.shape[0]
        x = torch.cat((self.cls_token.expand(b, -1, -1).to(tokens.dtype),
                       self.register_tokens.expand(b, -1, -1).to(tokens.dtype), tokens), dim=1)
        rope = None
        if use_rope:
            table = self.rope_2d if len(grid_shape) == 2 else self.rope_3d
            rope = table(grid_shape, dtype=tokens.dtype, device=tokens.device)
        taps = {}
        for i, blk in enumerate(self.blocks):
            x = blk(x, rope, self.n_prefix)
            if i in collect:
                taps[i] = self.norm(x)
        return self.norm(x), taps

    def encode_tokens(self, tokens: torch.Tensor, grid_shape: Sequence[int],
                      use_rope: bool = True) -> TokenSequence:
        """Run the transformer on already-embedded patch tokens (B, N, D)."""
        grid_shape = tuple(grid_shape)
        out, _ = self._run_blocks(tokens, grid_shape, use_rope)
        return TokenSequence(out, grid_shape, self.cfg.n_registers)

    def get_intermediate_layers(self, x: torch.Tensor, layer_ids: Sequence[int],
                                runtime_patch: Optional[int] = None) -> List[torch.Tensor]:
        """Normalized post-block patch features as (B, D, *grid), one per requested block.

        Raises:
            ValidationError: For block ids outside [0, depth)
        """
        bad = [i for i in layer_ids if not 0 <= i < self.cfg.depth]
        if bad:
            raise ValidationError(f"Block ids {bad} outside [0, {self.cfg.depth})")
        tokens, grid_shape = self.embed_patches(x, runtime_patch)
        _, taps = self._run_blocks(tokens, grid_shape, True, collect=set(layer_ids))
        b = x.shape[0]
        return [taps[i][:, self.n_prefix:].transpose(1, 2).reshape(b, -1, *grid_shape)
                for i in layer_ids]
