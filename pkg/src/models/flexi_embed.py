"""
Dimension-flexible patch embedding.

A single base-size kernel (p = 8) serves every runtime patch size. To embed
patches of size p' the kernel is mapped to W' = W R^+, where R is the
interpolation matrix that resizes a flattened p-patch to a p'-patch. For
upsampling resizes (full column rank R) this keeps every token unchanged:
<R x, W'> = <x, W>. The same rule inflates a 2D kernel to 3D along depth.
"""

from dataclasses import dataclass
from enum import Enum
import functools
import math
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core.errors import ValidationError
from .kernel_cache import KernelCache

DEFAULT_BASE_PATCH = 8

_pinv_cache = KernelCache(max_size=64)


class ResampleMethod(str, Enum):
    BICUBIC = "bicubic"
    TRILINEAR = "trilinear"
    LINEAR = "linear"
    NEAREST = "nearest"


@dataclass(frozen=True)
class ResampleMatrix:
    """Per-axis interpolation factors; the full matrix is their Kronecker product."""
    factors: Tuple[np.ndarray, ...]
    method: ResampleMethod
    base: int
    target: int

    @property
    def ndim(self) -> int:
        return len(self.factors)

    @property
    def entries(self) -> np.ndarray:
        """(target^d x base^d) matrix acting on C-order flattened patches."""
        return functools.reduce(np.kron, self.factors)


@dataclass
class PatchKernel:
    """Patch projection weights of shape (embed_dim, in_channels, p, ..., p)."""
    weights: torch.Tensor
    base_patch: int = DEFAULT_BASE_PATCH

    def __post_init__(self):
        if self.weights.ndim not in (4, 5):
            raise ValidationError(f"Kernel must be 2D or 3D, got shape {tuple(self.weights.shape)}")
        # depth may differ right after inflation; the in-plane patch is square
        if len(set(self.weights.shape[-2:])) != 1:
            raise ValidationError(f"Kernel must be square in-plane, got shape {tuple(self.weights.shape)}")
        if self.base_patch < 1 or self.base_patch & (self.base_patch - 1):
            raise ValidationError(f"base_patch must be a power of two, got {self.base_patch}")

    @property
    def ndim(self) -> int:
        return self.weights.ndim - 2

    @property
    def patch(self) -> int:
        return int(self.weights.shape[-1])


def _impulse_response(base: int, target: int, method: ResampleMethod) -> np.ndarray:
    """Column j = interpolation of the unit impulse at j (clamped borders)."""
    if base == target:
        return np.eye(base)
    impulses = torch.eye(base, dtype=torch.float64)
    if method in (ResampleMethod.LINEAR, ResampleMethod.TRILINEAR):
        out = F.interpolate(impulses[:, None, :], size=target, mode="linear", align_corners=False)
    elif method is ResampleMethod.NEAREST:
        out = F.interpolate(impulses[:, None, :], size=target, mode="nearest")
    else:
        out = F.interpolate(impulses[:, None, None, :], size=(1, target), mode="bicubic",
                            align_corners=False)
    return out.reshape(base, target).T.numpy().copy()


def build_resample_matrix(base: int, target: int, method, ndim: int = 1) -> ResampleMatrix:
    """Interpolation matrix resizing a ``base``-patch to a ``target``-patch.

    Raises:
        ValidationError: Non-positive sizes or an unsupported method
    """
    if base < 1 or target < 1:
        raise ValidationError(f"Patch sizes must be >= 1, got {base} -> {target}")
    try:
        method = ResampleMethod(method)
    except ValueError as e:
        raise ValidationError(f"Unsupported resample method: {method!r}") from e
    factor = _impulse_response(base, target, method)
    return ResampleMatrix(factors=(factor,) * ndim, method=method, base=base, target=target)


def _pinv(R: ResampleMatrix) -> torch.Tensor:
    key = (R.base, R.target, R.method.value, R.ndim)
    return _pinv_cache.get_or_create(
        key, lambda: torch.linalg.pinv(torch.from_numpy(R.entries)))


def resample_kernel(kernel: PatchKernel, R: ResampleMatrix) -> PatchKernel:
    """W' = W R^+ on flattened patches; gradients flow into ``kernel.weights``.

    Raises:
        ValidationError: If R does not match the kernel's patch size or dimensionality
    """
    if R.ndim != kernel.ndim or R.base != kernel.patch:
        raise ValidationError(
            f"Resample matrix ({R.base}->{R.target}, {R.ndim}D) does not fit a "
            f"{kernel.patch}-patch {kernel.ndim}D kernel")
    if R.base == R.target:
        return PatchKernel(kernel.weights, kernel.base_patch)
    w = kernel.weights
    e, c = w.shape[:2]
    pinv = _pinv(R).to(dtype=w.dtype, device=w.device)
    flat = w.reshape(e * c, -1) @ pinv
    return PatchKernel(flat.reshape(e, c, *([R.target] * kernel.ndim)), kernel.base_patch)


def inflate_to_3d(kernel: PatchKernel, depth: int) -> PatchKernel:
    """Add a depth axis through the pseudoinverse of the 1 -> depth replication matrix.

    Every depth slab ends up as W2d / depth, so a depth-constant patch yields
    the 2D token exactly.

    Raises:
        ValidationError: If the kernel is not 2D or depth < 1
    """
    if kernel.ndim != 2:
        raise ValidationError(f"inflate_to_3d needs a 2D kernel, got {kernel.ndim}D")
    if depth < 1:
        raise ValidationError(f"depth must be >= 1, got {depth}")
    w = kernel.weights
    if depth == 1:
        return PatchKernel(w.unsqueeze(2).clone(), kernel.base_patch)
    R_depth = build_resample_matrix(1, depth, ResampleMethod.TRILINEAR)
    pinv = _pinv(R_depth).to(dtype=torch.float64, device=w.device)[0]  # (depth,)
    inflated = torch.einsum("ecij,d->ecdij", w.to(torch.float64), pinv)
    return PatchKernel(inflated.to(w.dtype), kernel.base_patch)


def method_for(ndim: int) -> ResampleMethod:
    return ResampleMethod.BICUBIC if ndim == 2 else ResampleMethod.TRILINEAR


def embed(x: torch.Tensor, kernel: PatchKernel, runtime_patch: Optional[int] = None) -> torch.Tensor:
    """Project non-overlapping patches; returns (B, embed_dim, *grid).

    Raises:
        ValidationError: Dimensionality mismatch or spatial size not divisible by the patch
    """
    nd = x.ndim - 2
    if nd != kernel.ndim:
        raise ValidationError(f"{nd}D input given to a {kernel.ndim}D kernel")
    p = runtime_patch or kernel.patch
    if any(s % p for s in x.shape[2:]):
        raise ValidationError(f"Input size {tuple(x.shape[2:])} is not divisible by patch {p}")
    if p != kernel.patch:
        kernel = resample_kernel(kernel, build_resample_matrix(kernel.patch, p, method_for(nd), nd))
    conv = F.conv2d if nd == 2 else F.conv3d
    return conv(x, kernel.weights.to(x.dtype), stride=p)


class PatchEmbedND(nn.Module):
    """Bias-free patch embedding storing only the base-size kernel."""

    def __init__(self, embed_dim: int, ndim: int = 2, base_patch: int = DEFAULT_BASE_PATCH,
                 in_chans: int = 1):
        super().__init__()
        if ndim not in (2, 3):
            raise ValidationError(f"ndim must be 2 or 3, got {ndim}")
        self.ndim = ndim
        self.base_patch = base_patch
        self.weight = nn.Parameter(torch.empty(embed_dim, in_chans, *([base_patch] * ndim)))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))

    @property
    def kernel(self) -> PatchKernel:
        return PatchKernel(self.weight, self.base_patch)

    def forward(self, x: torch.Tensor, runtime_patch: Optional[int] = None) -> torch.Tensor:
        return embed(x, self.kernel, runtime_patch)
