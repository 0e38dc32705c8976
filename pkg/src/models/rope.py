"""Axis-decomposed rotary position embeddings for 2D and 3D patch grids."""

import math
from typing import Optional, Sequence, Tuple

import torch
import torch.nn as nn

from ..core.errors import ValidationError

DEFAULT_ROPE_BASE = 100.0


def rotate_half(x: torch.Tensor) -> torch.Tensor:
    x1, x2 = x.chunk(2, dim=-1)
    return torch.cat((-x2, x1), dim=-1)


def rope_rotate(x: torch.Tensor, sin: torch.Tensor, cos: torch.Tensor) -> torch.Tensor:
    return x * cos + rotate_half(x) * sin


def apply_rope(q: torch.Tensor, k: torch.Tensor, sin: torch.Tensor, cos: torch.Tensor,
               n_prefix: int = 0) -> Tuple[torch.Tensor, torch.Tensor]:
    """Rotate patch tokens of q and k; the first ``n_prefix`` tokens (CLS, registers) stay put.

    q, k: (..., T, head_dim); sin, cos: (T - n_prefix, head_dim).
    """
    if n_prefix == 0:
        return rope_rotate(q, sin, cos), rope_rotate(k, sin, cos)
    q = torch.cat((q[..., :n_prefix, :], rope_rotate(q[..., n_prefix:, :], sin, cos)), dim=-2)
    k = torch.cat((k[..., :n_prefix, :], rope_rotate(k[..., n_prefix:, :], sin, cos)), dim=-2)
    return q, k


class RopeND(nn.Module):
    """Per-axis rotation tables.

    The head dimension is split into equal shares per axis; each share holds
    ``head_dim // (2 * n_axes)`` frequencies forming a decreasing geometric
    sequence. Patch coordinates are normalized to [-1, 1] per axis.
    """

    def __init__(self, head_dim: int, n_axes: int, base: float = DEFAULT_ROPE_BASE):
        super().__init__()
        if n_axes not in (2, 3):
            raise ValidationError(f"RoPE supports 2 or 3 axes, got {n_axes}")
        if head_dim % (2 * n_axes):
            raise ValidationError(f"Head dim {head_dim} not divisible by {2 * n_axes} for {n_axes}-axis RoPE")
        self.head_dim = head_dim
        self.n_axes = n_axes
        self.base = base
        self.n_freqs = head_dim // (2 * n_axes)
        self.register_buffer("periods", torch.empty(self.n_freqs))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        exponents = torch.arange(self.n_freqs, dtype=torch.float64) / self.n_freqs
        self.periods.copy_((self.base ** exponents).to(self.periods.dtype))

    @property
    def frequencies(self) -> torch.Tensor:
        return 1.0 / self.periods

    def angles(self, positions: torch.Tensor) -> torch.Tensor:
        """positions (N, n_axes) -> rotation angles (N, head_dim // 2), axis-major."""
        if positions.shape[-1] != self.n_axes:
            raise ValidationError(f"Expected {self.n_axes} coordinates, got {positions.shape[-1]}")
        periods = self.periods.to(positions.dtype)
        ang = 2 * math.pi * positions[..., None] / periods
        return ang.flatten(-2)

    def sin_cos(self, positions: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        ang = self.angles(positions)
        ang = torch.cat((ang, ang), dim=-1)
        return ang.sin(), ang.cos()

    @staticmethod
    def grid_positions(grid_shape: Sequence[int], dtype=torch.float32,
                       device: Optional[torch.device] = None) -> torch.Tensor:
        """Patch centres normalized to [-1, 1], C-order over the grid."""
        if any(g < 1 for g in grid_shape):
            raise ValidationError(f"Patch grid {tuple(grid_shape)} has an empty axis")
        axes = [(torch.arange(n, dtype=dtype, device=device) + 0.5) / n * 2 - 1 for n in grid_shape]
        mesh = torch.meshgrid(*axes, indexing="ij")
        return torch.stack(mesh, dim=-1).reshape(-1, len(grid_shape))

    def forward(self, grid_shape: Sequence[int], dtype=torch.float32,
                device: Optional[torch.device] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        if len(grid_shape) != self.n_axes:
            raise ValidationError(f"{len(grid_shape)}D grid given to {self.n_axes}D RoPE")
        return self.sin_cos(self.grid_positions(grid_shape, dtype, device))
