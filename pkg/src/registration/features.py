"""
Dense slice-wise feature volumes from a frozen 2D backbone.

Every axial slice goes through the 2D path on its own; the normalized outputs
of the tapped blocks are concatenated channel-wise and the per-slice grids are
stacked along depth, giving (4*embed_dim, D, H/p, W/p) for four taps.
"""

from dataclasses import dataclass
from enum import Enum
import logging
from typing import Optional, Sequence

import numpy as np
import torch

from ..core.errors import ValidationError
from ..models.vit import FlexiViT
from ..volume.preprocess import HU_CLAMP

logger = logging.getLogger(__name__)

SLICE_BATCH = 16


class Modality(str, Enum):
    CT = "ct"
    MR = "mr"


def normalize_for_registration(volume: np.ndarray, modality: Modality = Modality.CT) -> np.ndarray:
    """CT: clip to the HU window then map to [0, 1]; MR: min-max to [0, 1]."""
    arr = np.asarray(volume, dtype=np.float64)
    if Modality(modality) is Modality.CT:
        lo, hi = HU_CLAMP
        arr = np.clip(arr, lo, hi)
    else:
        lo, hi = float(arr.min()), float(arr.max())
        if hi - lo < 1e-12:
            return np.zeros(arr.shape, dtype=np.float32)
    return ((arr - lo) / (hi - lo)).astype(np.float32)


@dataclass
class FeatureVolume:
    """(C, D, h, w) channels-first features on the patch grid of an image volume."""
    data: np.ndarray
    patch_size: int
    image_shape: tuple

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise ValidationError(f"Feature volume must be (C, D, h, w), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("Feature volume has non-finite values")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def grid_shape(self) -> tuple:
        return tuple(self.data.shape[1:])

    def vectors(self) -> np.ndarray:
        """(n_voxels, C) view for PCA fitting."""
        return self.data.reshape(self.channels, -1).T


@torch.no_grad()
def extract_dense_features(volume: np.ndarray, backbone: FlexiViT,
                           layer_ids: Optional[Sequence[int]] = None,
                           runtime_patch: Optional[int] = None,
                           batch_size: int = SLICE_BATCH) -> FeatureVolume:
    """Slice-wise intermediate features of a normalized (D, H, W) volume.

    Raises:
        ValidationError: If a slice is smaller than one patch
    """
    volume = np.asarray(volume, dtype=np.float32)
    if volume.ndim != 3:
        raise ValidationError(f"Expected a (D, H, W) volume, got {volume.shape}")
    layer_ids = list(layer_ids) if layer_ids is not None else backbone.cfg.default_source_blocks()
    patch = runtime_patch or backbone.cfg.base_patch
    if volume.shape[1] < patch or volume.shape[2] < patch:
        raise ValidationError(f"Slices {volume.shape[1:]} are smaller than the patch size {patch}")
    was_training = backbone.training
    backbone.eval()
    chunks = []
    for start in range(0, volume.shape[0], batch_size):
        x = torch.from_numpy(volume[start:start + batch_size, None])
        taps = backbone.get_intermediate_layers(x, layer_ids, runtime_patch=patch)
        chunks.append(torch.cat(taps, dim=1).numpy())
    backbone.train(was_training)
    data = np.concatenate(chunks, axis=0).transpose(1, 0, 2, 3)
    logger.debug("Extracted %s features from a %s volume", data.shape, volume.shape)
    return FeatureVolume(data, patch, tuple(volume.shape))
