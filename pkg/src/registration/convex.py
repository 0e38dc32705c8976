"""
Coupled-convex coarse displacement search.

For control points on a stride-g grid, an SSD cost volume is evaluated over
every integer displacement within the search radius. The field is then
found by alternating a per-point argmin, coupled quadratically to the
current smoothed field, with Gaussian smoothing of the result.
"""

from dataclasses import dataclass
import itertools
import logging
from typing import Tuple

import numpy as np
from scipy import ndimage

from ..core.errors import ValidationError
from .features import FeatureVolume
from .field import DisplacementField

logger = logging.getLogger(__name__)

# breaks exact cost ties towards the smallest displacement
TIE_BREAK = 1e-9


@dataclass
class ConvexAdamParams:
    lr: float = 3.0
    smooth_weight: float = 2.0
    iterations: int = 1000
    smooth_kernel: int = 7
    smooth_passes: int = 5
    warmup_fraction: float = 0.1
    search_radius: int = 8
    grid_stride: int = 2
    patch_radius: int = 1
    coupling_weights: Tuple[float, ...] = (0.1, 0.3, 1.0)
    coarse_sigma: float = 1.0

    def validate(self) -> None:
        for name in ("lr", "smooth_weight", "iterations", "smooth_kernel", "smooth_passes", "grid_stride"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.search_radius < 0 or self.patch_radius < 0:
            raise ValidationError("search_radius and patch_radius must be >= 0")
        if self.smooth_kernel % 2 == 0:
            raise ValidationError(f"smooth_kernel must be odd, got {self.smooth_kernel}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValidationError(f"warmup_fraction must be in [0, 1), got {self.warmup_fraction}")


def as_feature_array(features) -> np.ndarray:
    data = features.data if isinstance(features, FeatureVolume) else features
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 3:
        data = data[None]
    if data.ndim != 4:
        raise ValidationError(f"Expected (C, D, H, W) features, got {data.shape}")
    return data


def displacement_candidates(radius: int, shape: Tuple[int, int, int]) -> np.ndarray:
    """Integer offsets within ``radius`` (clipped per axis to the grid extent), (K, 3)."""
    ranges = [range(-min(radius, n - 1), min(radius, n - 1) + 1) for n in shape]
    return np.array(list(itertools.product(*ranges)), dtype=np.int64)


def cost_volume(fixed: np.ndarray, moving: np.ndarray, disps: np.ndarray, stride: int,
                patch_radius: int) -> np.ndarray:
    """Patch-averaged SSD at every control point for every candidate, (K, n_ctrl)."""
    shape = fixed.shape[1:]
    pad = int(np.abs(disps).max()) if disps.size else 0
    padded = np.pad(moving, [(0, 0)] + [(pad, pad)] * 3, mode="edge")
    ctrl = tuple(slice(0, n, stride) for n in shape)
    size = 2 * patch_radius + 1
    out = []
    for d in disps:
        window = tuple(slice(pad + int(o), pad + int(o) + n) for o, n in zip(d, shape))
        ssd = np.sum((fixed - padded[(slice(None),) + window]) ** 2, axis=0)
        out.append(ndimage.uniform_filter(ssd, size=size, mode="nearest")[ctrl].ravel())
    return np.stack(out)


def _smooth_ctrl(u: np.ndarray, sigma: float) -> np.ndarray:
    return np.stack([ndimage.gaussian_filter(c, sigma, mode="nearest") for c in u])


def _upsample_ctrl(u: np.ndarray, shape: Tuple[int, int, int], stride: int) -> np.ndarray:
    coords = np.meshgrid(*[np.arange(n) / stride for n in shape], indexing="ij")
    return np.stack([ndimage.map_coordinates(c, coords, order=1, mode="nearest") for c in u])


def convex_coarse(fixed, moving, params: ConvexAdamParams = None) -> DisplacementField:
    """Coarse field on the feature grid; radius 0 gives the zero field."""
    params = params or ConvexAdamParams()
    params.validate()
    f, m = as_feature_array(fixed), as_feature_array(moving)
    if f.shape != m.shape:
        raise ValidationError(f"Fixed {f.shape} and moving {m.shape} features differ")
    shape = f.shape[1:]
    if params.search_radius == 0:
        return DisplacementField.zeros(shape)

    disps = displacement_candidates(params.search_radius, shape)
    cost = cost_volume(f, m, disps, params.grid_stride, params.patch_radius)
    scale = cost.mean()
    if scale <= 0:
        return DisplacementField.zeros(shape)
    cost = cost / scale + TIE_BREAK * np.sum(disps ** 2, axis=1)[:, None]

    ctrl_shape = tuple(len(range(0, n, params.grid_stride)) for n in shape)
    best = disps[cost.argmin(axis=0)].T.astype(np.float64)
    smooth = _smooth_ctrl(best.reshape(3, *ctrl_shape), params.coarse_sigma)
    for weight in params.coupling_weights:
        target = smooth.reshape(3, -1)
        coupling = (np.sum(disps ** 2, axis=1)[:, None] - 2.0 * disps @ target
                    + np.sum(target ** 2, axis=0)[None])
        best = disps[(cost + weight * coupling).argmin(axis=0)].T.astype(np.float64)
        smooth = _smooth_ctrl(best.reshape(3, *ctrl_shape), params.coarse_sigma)

    u = _upsample_ctrl(smooth, shape, params.grid_stride)
    logger.info("Coarse search: %d candidates, mean |u| %.3f", len(disps),
                float(np.sqrt((u ** 2).sum(axis=0)).mean()))
    return DisplacementField(u, {"stage": "coarse"})
