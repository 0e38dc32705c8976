"""
Teacher checkpoints on top of the tensor container.

Tensor names are prefixed by module: ``backbone.*``, ``dino_head.*``,
``ibot_head.*`` and, after Phase 3, ``vlm_heads.*`` and ``text_encoder.*``.
The manifest ``meta`` records the phase tag, base patch size, RoPE
dimensionality and the configs needed to rebuild the modules.
"""

from dataclasses import asdict, dataclass, field
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import torch
import torch.nn as nn

from ..core.compression import CompressionLike
from ..core.container import ContainerKind, TensorContainer
from ..core.errors import FormatError, ValidationError
from ..core.format import CompressionType
from ..models.heads import HeadConfig, ProjectionHead
from ..models.vit import BackboneConfig, FlexiViT
from ..models.vlm import VLMHeads
from ..text.encoder import TextConfig, ToyTextEncoder

logger = logging.getLogger(__name__)

MODULE_PREFIXES = ("backbone", "dino_head", "ibot_head", "vlm_heads", "text_encoder")


@dataclass
class CheckpointBundle:
    tensors: Dict[str, np.ndarray]
    phase: str
    base_patch: int
    rope_dims: int
    meta: Dict[str, Any] = field(default_factory=dict)

    def to_container(self) -> TensorContainer:
        meta = dict(self.meta)
        meta.update({"phase": self.phase, "base_patch": self.base_patch, "rope_dims": self.rope_dims})
        return TensorContainer(ContainerKind.CHECKPOINT, dict(self.tensors), meta)

    @classmethod
    def from_container(cls, container: TensorContainer) -> 'CheckpointBundle':
        meta = dict(container.meta)
        try:
            phase, base_patch, rope_dims = meta.pop("phase"), meta.pop("base_patch"), meta.pop("rope_dims")
        except KeyError as e:
            raise FormatError(f"Checkpoint metadata is missing {e}") from e
        return cls(container.tensors, str(phase), int(base_patch), int(rope_dims), meta)

    def to_bytes(self, compression: CompressionLike = CompressionType.NONE) -> bytes:
        return self.to_container().to_bytes(compression)

    def save(self, path: Union[str, Path], compression: CompressionLike = CompressionType.NONE) -> Path:
        path = self.to_container().save(path, compression)
        logger.info("Saved %s checkpoint with %d tensors to %s", self.phase, len(self.tensors), path)
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'CheckpointBundle':
        return cls.from_container(TensorContainer.load(path, ContainerKind.CHECKPOINT))

    def module_state(self, prefix: str) -> Dict[str, torch.Tensor]:
        head = prefix + "."
        return {k[len(head):]: torch.from_numpy(v.copy()) for k, v in self.tensors.items()
                if k.startswith(head)}

    def has_module(self, prefix: str) -> bool:
        return any(k.startswith(prefix + ".") for k in self.tensors)

    @property
    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(**self.meta["backbone"])

    @property
    def head_config(self) -> HeadConfig:
        return HeadConfig(**self.meta["heads"])


def export_modules(modules: Dict[str, nn.Module], phase: str, backbone_cfg: BackboneConfig,
                   head_cfg: HeadConfig, rope_dims: int, text_cfg: Optional[TextConfig] = None,
                   extra_meta: Optional[Dict[str, Any]] = None) -> CheckpointBundle:
    """Flatten module state dicts (parameters and buffers) into a bundle, in prefix order."""
    tensors: Dict[str, np.ndarray] = {}
    for prefix in MODULE_PREFIXES:
        module = modules.get(prefix)
        if module is None:
            continue
        for name, value in module.state_dict().items():
            tensors[f"{prefix}.{name}"] = value.detach().cpu().to(torch.float32).numpy().copy()
    meta: Dict[str, Any] = {"backbone": asdict(backbone_cfg), "heads": asdict(head_cfg)}
    if text_cfg is not None:
        meta["text"] = asdict(text_cfg)
    meta.update(extra_meta or {})
    return CheckpointBundle(tensors, phase, backbone_cfg.base_patch, rope_dims, meta)


def _load(module: nn.Module, bundle: CheckpointBundle, prefix: str) -> nn.Module:
    state = bundle.module_state(prefix)
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise ValidationError(f"Checkpoint tensors do not fit {prefix}: {e}") from e
    return module


@dataclass
class RestoredModels:
    backbone: FlexiViT
    dino_head: Optional[ProjectionHead] = None
    ibot_head: Optional[ProjectionHead] = None
    vlm_heads: Optional[VLMHeads] = None
    text_encoder: Optional[ToyTextEncoder] = None


def build_backbone_from_checkpoint(bundle: CheckpointBundle) -> FlexiViT:
    """Rebuild the backbone described by the manifest and load its tensors."""
    return _load(FlexiViT(bundle.backbone_config), bundle, "backbone")


def restore_models(bundle: CheckpointBundle) -> RestoredModels:
    cfg = bundle.backbone_config
    restored = RestoredModels(build_backbone_from_checkpoint(bundle))
    for prefix in ("dino_head", "ibot_head"):
        if bundle.has_module(prefix):
            setattr(restored, prefix, _load(ProjectionHead(cfg.embed_dim, bundle.head_config), bundle, prefix))
    if bundle.has_module("vlm_heads"):
        text_cfg = TextConfig(**bundle.meta["text"])
        restored.text_encoder = _load(ToyTextEncoder(text_cfg), bundle, "text_encoder")
        restored.vlm_heads = _load(VLMHeads(cfg.embed_dim, text_cfg.dim, text_cfg.proj_dim), bundle, "vlm_heads")
    return restored
