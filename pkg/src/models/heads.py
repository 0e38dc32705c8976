"""DINO / iBOT projection heads."""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import weight_norm

from ..core.errors import ValidationError


@dataclass
class HeadConfig:
    n_prototypes: int = 65536
    hidden_dim: int = 2048
    bottleneck_dim: int = 256

    @classmethod
    def preset(cls, name: str) -> 'HeadConfig':
        if name == "full":
            return cls()
        if name == "toy":
            return cls(n_prototypes=256, hidden_dim=128, bottleneck_dim=64)
        raise ValidationError(f"Unknown head preset: {name!r}")


class ProjectionHead(nn.Module):
    """3-layer MLP to an L2-normalized bottleneck, then a weight-normalized prototype layer."""

    def __init__(self, in_dim: int, cfg: HeadConfig):
        super().__init__()
        self.cfg = cfg
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, cfg.hidden_dim), nn.GELU(),
            nn.Linear(cfg.hidden_dim, cfg.hidden_dim), nn.GELU(),
            nn.Linear(cfg.hidden_dim, cfg.bottleneck_dim),
        )
        for m in self.mlp:
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
        self.last_layer = weight_norm(nn.Linear(cfg.bottleneck_dim, cfg.n_prototypes, bias=False))
        # norm of each prototype fixed to 1
        g = self.last_layer.parametrizations.weight.original0
        with torch.no_grad():
            g.fill_(1.0)
        g.requires_grad_(False)

    @property
    def n_prototypes(self) -> int:
        return self.cfg.n_prototypes

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.normalize(self.mlp(x), dim=-1, eps=1e-6)
        return self.last_layer(x)
