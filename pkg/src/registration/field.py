"""
Displacement fields and their regularity diagnostics.

A field is a (3, D, H, W) array of displacements in voxel units; component k
moves along array axis k. Backward convention: the warped image at x samples
the moving image at x + u(x).
"""

from dataclasses import dataclass, field
import logging
from typing import Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from ..core.errors import ValidationError

logger = logging.getLogger(__name__)


@dataclass
class DisplacementField:
    u: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        if self.u.ndim != 4 or self.u.shape[0] != 3:
            raise ValidationError(f"Displacement field must be (3, D, H, W), got {self.u.shape}")
        if not np.all(np.isfinite(self.u)):
            raise ValidationError("Displacement field has non-finite values")

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> 'DisplacementField':
        return cls(np.zeros((3, *shape)))

    @property
    def grid_shape(self) -> Tuple[int, int, int]:
        return tuple(self.u.shape[1:])

    def magnitude(self) -> np.ndarray:
        return np.sqrt(np.sum(self.u ** 2, axis=0))

    def mean_magnitude(self) -> float:
        return float(self.magnitude().mean())

    def endpoint_error(self, reference: np.ndarray, mask: np.ndarray = None) -> float:
        """Mean |u - reference| over ``mask`` (all voxels by default)."""
        reference = np.asarray(reference, dtype=np.float64)
        if reference.size == 3:
            reference = reference.reshape(3, 1, 1, 1)
        err = np.sqrt(np.sum((self.u - reference) ** 2, axis=0))
        return float(err[mask].mean() if mask is not None else err.mean())


@dataclass(frozen=True)
class JacobianStats:
    log_std: float
    nonpositive_fraction: float


def _axis_gradient(a: np.ndarray, axis: int) -> np.ndarray:
    if a.shape[axis] < 2:
        return np.zeros_like(a)
    return np.gradient(a, axis=axis)


def jacobian_determinant(u: np.ndarray) -> np.ndarray:
    """det(I + grad u) from central differences (one-sided at the borders)."""
    u = np.asarray(u, dtype=np.float64)
    jac = np.empty(u.shape[1:] + (3, 3))
    for i in range(3):
        for j in range(3):
            jac[..., i, j] = _axis_gradient(u[i], j) + (1.0 if i == j else 0.0)
    return np.linalg.det(jac)


def jacobian_stats(disp: DisplacementField) -> JacobianStats:
    det = jacobian_determinant(disp.u)
    positive = det > 0
    frac = float(1.0 - positive.mean())
    if frac > 0:
        logger.warning("%.2f%% of voxels fold (non-positive Jacobian determinant)", 100 * frac)
    log_std = float(np.log(det[positive]).std()) if positive.any() else float("nan")
    return JacobianStats(log_std=log_std, nonpositive_fraction=frac)


def jacobian_logstd(disp: DisplacementField) -> float:
    """Standard deviation of log det J over voxels with det > 0."""
    return jacobian_stats(disp).log_std


def upsample_field(disp: DisplacementField, shape: Sequence[int]) -> DisplacementField:
    """Resample a feature-grid field onto an image grid and rescale its components.

    Feature voxel j is taken to cover image voxels [j*s, (j+1)*s) along an
    axis with scale s, matching the patch grid of a ViT.
    """
    shape = tuple(int(n) for n in shape)
    src = disp.grid_shape
    if len(shape) != 3 or any(n < m for n, m in zip(shape, src)):
        raise ValidationError(f"Target shape {shape} must be 3D and no smaller than {src}")
    scale = torch.tensor([n / m for n, m in zip(shape, src)], dtype=torch.float64).view(1, 3, 1, 1, 1)
    u = torch.from_numpy(disp.u)[None]
    up = F.interpolate(u, size=shape, mode="trilinear", align_corners=False) * scale
    return DisplacementField(up[0].numpy(), dict(disp.meta))
