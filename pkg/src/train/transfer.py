"""2D -> 3D checkpoint transfer."""

import logging

import numpy as np
import torch

from ..core.errors import ValidationError
from ..models.flexi_embed import PatchKernel, inflate_to_3d
from ..models.rope import RopeND
from .checkpoint import CheckpointBundle

logger = logging.getLogger(__name__)

PATCH_2D = "backbone.patch_embed_2d.weight"
PATCH_3D = "backbone.patch_embed_3d.weight"
ROPE_3D = "backbone.rope_3d.periods"


def transfer_2d_to_3d(bundle: CheckpointBundle) -> CheckpointBundle:
    """Copy every tensor and inflate the 2D patch kernel along depth.

    RoPE tables hold no learned state: the 3D periods are a pure function of
    ``head_dim`` and ``rope_base``, so the table already stored in the
    checkpoint is the freshly initialized one. It is checked against the
    config, not rewritten.

    Raises:
        ValidationError: If the bundle is not a 2D checkpoint, tensor shapes
            disagree or the stored 3D RoPE table does not match the config
    """
    if bundle.rope_dims != 2:
        raise ValidationError(f"Expected a 2D checkpoint, got RoPE dimensionality {bundle.rope_dims}")
    for name in (PATCH_2D, PATCH_3D, ROPE_3D):
        if name not in bundle.tensors:
            raise ValidationError(f"Checkpoint lacks {name}")
    w2d = bundle.tensors[PATCH_2D]
    w3d_old = bundle.tensors[PATCH_3D]
    if w2d.ndim != 4 or w2d.shape[-1] != bundle.base_patch:
        raise ValidationError(f"2D patch kernel has shape {w2d.shape}, base patch {bundle.base_patch}")
    inflated = inflate_to_3d(PatchKernel(torch.from_numpy(w2d.copy()), bundle.base_patch), bundle.base_patch)
    w3d = inflated.weights.numpy().astype(np.float32)
    if w3d.shape != w3d_old.shape:
        raise ValidationError(f"Inflated kernel {w3d.shape} does not match 3D slot {w3d_old.shape}")

    cfg = bundle.backbone_config
    expected = RopeND(cfg.head_dim, 3, cfg.rope_base).periods.numpy().astype(np.float32)
    stored = bundle.tensors[ROPE_3D]
    if stored.shape != expected.shape or not np.allclose(stored, expected, rtol=1e-6):
        raise ValidationError(f"Stored 3D RoPE periods do not match head_dim {cfg.head_dim}, "
                              f"rope_base {cfg.rope_base}")

    tensors = {name: (w3d if name == PATCH_3D else value.copy()) for name, value in bundle.tensors.items()}
    meta = dict(bundle.meta)
    meta["transferred_from"] = bundle.phase
    logger.info("Transferred %s checkpoint to 3D (%d tensors)", bundle.phase, len(tensors))
    return CheckpointBundle(tensors, "transfer", bundle.base_patch, 3, meta)
