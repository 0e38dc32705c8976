"""Backward warping of images, feature volumes and label maps."""

from enum import Enum
from typing import Union

import numpy as np
import torch
import torch.nn.functional as F

from ..core.errors import ValidationError
from .field import DisplacementField


class Interp(str, Enum):
    LINEAR = "linear"
    NEAREST = "nearest"


def sampling_grid(u: torch.Tensor) -> torch.Tensor:
    """(B, 3, D, H, W) voxel displacements -> grid_sample grid (B, D, H, W, 3) in (x, y, z) order.

    Uses the align_corners=True convention, so voxel centres sit at -1 and 1
    on every axis.
    """
    shape = u.shape[2:]
    axes = [torch.arange(n, dtype=u.dtype, device=u.device) for n in shape]
    ident = torch.stack(torch.meshgrid(*axes, indexing="ij"))[None]
    pos = ident + u
    coords = []
    for k, n in enumerate(shape):
        coords.append(pos[:, k] * (2.0 / (n - 1)) - 1.0 if n > 1 else torch.zeros_like(pos[:, k]))
    return torch.stack(coords[::-1], dim=-1)


def warp_tensor(moving: torch.Tensor, u: torch.Tensor, mode: str = "bilinear") -> torch.Tensor:
    """Differentiable warp of (B, C, D, H, W) by (B, 3, D, H, W); border values outside the grid."""
    return F.grid_sample(moving, sampling_grid(u).to(moving.dtype), mode=mode,
                         padding_mode="border", align_corners=True)


def warp(array: np.ndarray, disp: Union[DisplacementField, np.ndarray],
         interp: Interp = Interp.LINEAR) -> np.ndarray:
    """output(x) = array(x + u(x)) for (D, H, W) or (C, D, H, W) arrays.

    Nearest-neighbour mode only ever copies existing values, which keeps label
    maps valid.
    """
    u = disp.u if isinstance(disp, DisplacementField) else np.asarray(disp, dtype=np.float64)
    array = np.asarray(array)
    squeeze = array.ndim == 3
    vol = array[None] if squeeze else array
    if vol.ndim != 4 or vol.shape[1:] != u.shape[1:]:
        raise ValidationError(f"Array {array.shape} does not match field grid {u.shape[1:]}")
    mode = "nearest" if Interp(interp) is Interp.NEAREST else "bilinear"
    with torch.no_grad():
        out = warp_tensor(torch.from_numpy(vol.astype(np.float64))[None],
                          torch.from_numpy(u)[None], mode)[0].numpy()
    if np.issubdtype(array.dtype, np.integer):
        out = np.rint(out)
    out = out.astype(array.dtype, copy=False)
    return out[0] if squeeze else out
